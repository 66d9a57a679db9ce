"""Cohort files on disk.

A cohort directory holds line-delimited JSON (one encounter per line):

* ``observations.jsonl``: ``encounter_id, stay_hours, time_h[], channel[], value[]``
* ``events.jsonl``: antibiotic and culture times, organ-score inputs, planted onset
* ``labels.jsonl``: derived ``label, onset_hour, si_time``
* ``cohort.json``: matched, filtered cohort membership and matching groups
* ``manifest.json``: schema, seed, generator spec and its digest, counts,
  prevalence, and the sha256 of every file above

Keys are sorted and floats use ``repr`` so identical content gives identical bytes.
"""

import hashlib
import json
from pathlib import Path

import numpy as np

from ..errors import DataError
from ..mgp import Encounter
from .cohort import LabeledCohort
from .synthetic import RawEncounter

SCHEMA = "earlysepsis-cohort/1"
FILES = ("observations.jsonl", "events.jsonl", "labels.jsonl", "cohort.json")


def _dump(obj):
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def sha256_file(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def spec_digest(spec_dict):
    return hashlib.sha256(_dump(spec_dict).encode()).hexdigest()


def _write_lines(path, records):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for rec in records:
            fh.write(_dump(rec) + "\n")


def _read_lines(path):
    path = Path(path)
    if not path.exists():
        raise DataError(f"missing cohort file {path}")
    out = []
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                out.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{n}: malformed record ({exc.msg})") from exc
    return out


def write_raw(out_dir, raw):
    out = Path(out_dir)
    _write_lines(out / "observations.jsonl", (
        {"encounter_id": r.id, "stay_hours": r.stay_hours, "time_h": r.times.tolist(),
         "channel": r.channels.tolist(), "value": r.values.tolist()} for r in raw))
    _write_lines(out / "events.jsonl", (
        {"encounter_id": r.id, "antibiotics": r.antibiotics.tolist(), "cultures": r.cultures.tolist(),
         "organ_time_h": r.organ_times.tolist(), "organ": r.organs.tolist(),
         "organ_value": r.organ_values.tolist(), "planted_onset": r.planted_onset} for r in raw))


def read_raw(in_dir):
    src = Path(in_dir)
    obs = _read_lines(src / "observations.jsonl")
    events = {e["encounter_id"]: e for e in _read_lines(src / "events.jsonl")}
    raw = []
    try:
        for o in obs:
            e = events[o["encounter_id"]]
            raw.append(RawEncounter(
                o["encounter_id"], float(o["stay_hours"]), np.array(o["time_h"], float),
                np.array(o["channel"], np.int64), np.array(o["value"], float),
                np.array(e["antibiotics"], float), np.array(e["cultures"], float),
                np.array(e["organ_time_h"], float), np.array(e["organ"], np.int64),
                np.array(e["organ_value"], float), e["planted_onset"]))
    except KeyError as exc:
        raise DataError(f"cohort files in {src} are inconsistent: missing {exc}") from exc
    return raw


def write_labels(out_dir, labels):
    _write_lines(Path(out_dir) / "labels.jsonl", (
        {"encounter_id": i, "label": lab[0], "onset_hour": lab[1], "si_time": lab[2]}
        for i, lab in sorted(labels.items())))


def read_labels(in_dir):
    return {r["encounter_id"]: (int(r["label"]), r["onset_hour"], r["si_time"])
            for r in _read_lines(Path(in_dir) / "labels.jsonl")}


def write_cohort(out_dir, cohort):
    rec = {"members": [{"encounter_id": e.id, "label": e.label, "onset_hour": e.onset_hour}
                       for e in cohort.encounters],
           "matching": cohort.matching}
    (Path(out_dir) / "cohort.json").write_text(_dump(rec) + "\n", encoding="utf-8")


def read_cohort(in_dir, raw=None):
    """:class:`LabeledCohort` from a cohort directory."""
    src = Path(in_dir)
    path = src / "cohort.json"
    if not path.exists():
        raise DataError(f"missing cohort file {path}")
    rec = json.loads(path.read_text(encoding="utf-8"))
    raw = {r.id: r for r in (raw if raw is not None else read_raw(src))}
    encounters = []
    for m in rec["members"]:
        r = raw.get(m["encounter_id"])
        if r is None:
            raise DataError(f"cohort member {m['encounter_id']} has no observations record")
        encounters.append(Encounter(r.id, r.times, r.channels, r.values, m["label"], m["onset_hour"]))
    return LabeledCohort(encounters, {k: list(v) for k, v in rec["matching"].items()})


def write_manifest(out_dir, seed, spec_dict, raw, labels, cohort):
    out = Path(out_dir)
    manifest = {
        "schema": SCHEMA,
        "seed": seed,
        "generator": spec_dict,
        "generator_digest": spec_digest(spec_dict),
        "counts": {
            "raw_encounters": len(raw),
            "raw_cases": int(sum(lab[0] for lab in labels.values())),
            "encounters": len(cohort.encounters),
            "cases": int(sum(e.label for e in cohort.encounters)),
            "controls": int(sum(1 - e.label for e in cohort.encounters)),
        },
        "prevalence": cohort.prevalence,
        "files": {name: sha256_file(out / name) for name in FILES if (out / name).exists()},
    }
    text = json.dumps(manifest, sort_keys=True, indent=2) + "\n"
    (out / "manifest.json").write_text(text, encoding="utf-8")
    return hashlib.sha256(text.encode()).hexdigest()


def read_manifest(in_dir):
    path = Path(in_dir) / "manifest.json"
    if not path.exists():
        raise DataError(f"missing manifest {path}")
    manifest = json.loads(path.read_text(encoding="utf-8"))
    if manifest.get("schema") != SCHEMA:
        raise DataError(f"unsupported cohort schema {manifest.get('schema')!r}")
    return manifest
