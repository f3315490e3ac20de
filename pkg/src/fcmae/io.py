"""File formats: FC matrices, parcellations, cohort manifests, CSV reports.

FC matrices come in two interchangeable forms:

* CSV: R rows of R comma-separated decimals.
* binary: 8-byte magic ``FCMAT001``, uint32-LE region count, then R*R
  float64-LE values row-major.

A cohort manifest is a CSV with header
``subject_id,fc_path,age,sex,<target columns...>``; fc paths are resolved
relative to the manifest's directory, sex is coded 0/1.
"""

from __future__ import annotations

import csv
import struct
from pathlib import Path

import numpy as np

from .errors import DataError
from .fc import Cohort, FCMatrix, Parcellation, Subject

FC_MAGIC = b"FCMAT001"


def save_fc_csv(path, fc: FCMatrix) -> None:
    # %.17g round-trips float64 exactly
    np.savetxt(path, fc.values, delimiter=",", fmt="%.17g")


def save_fc_binary(path, fc: FCMatrix) -> None:
    with open(path, "wb") as fh:
        fh.write(FC_MAGIC)
        fh.write(struct.pack("<I", fc.size))
        fh.write(fc.values.astype("<f8").tobytes())


def load_fc(path) -> FCMatrix:
    """Load an FC matrix, sniffing binary magic vs CSV."""
    path = Path(path)
    if not path.is_file():
        raise DataError(f"FC file not found: {path}")
    with open(path, "rb") as fh:
        head = fh.read(len(FC_MAGIC))
        if head == FC_MAGIC:
            raw = fh.read(4)
            if len(raw) < 4:
                raise DataError(f"truncated FC file: {path}")
            (r,) = struct.unpack("<I", raw)
            data = fh.read(8 * r * r)
            if len(data) != 8 * r * r:
                raise DataError(f"truncated FC file: {path}")
            values = np.frombuffer(data, dtype="<f8").reshape(r, r)
            return FCMatrix(values=values)
    try:
        values = np.loadtxt(path, delimiter=",", dtype=np.float64, ndmin=2)
    except ValueError as exc:
        raise DataError(f"cannot parse FC CSV {path}: {exc}") from exc
    return FCMatrix(values=values)


def save_parcellation(path, parc: Parcellation) -> None:
    with open(path, "w") as fh:
        for i, net in enumerate(parc.assignment):
            fh.write(f"{i},{net}\n")


def load_parcellation(path) -> Parcellation:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"parcellation file not found: {path}")
    assignment = []
    with open(path) as fh:
        for lineno, line in enumerate(fh):
            line = line.strip()
            if not line:
                continue
            try:
                idx_s, net_s = line.split(",")
                idx, net = int(idx_s), int(net_s)
            except ValueError as exc:
                raise DataError(f"{path}:{lineno + 1}: expected 'region,network'") from exc
            if idx != len(assignment):
                raise DataError(f"{path}:{lineno + 1}: regions must be listed in matrix order")
            assignment.append(net)
    return Parcellation(assignment=np.array(assignment, dtype=np.int64))


def save_cohort(out_dir, cohort: Cohort, fc_format: str = "binary") -> Path:
    """Write FC files plus manifest under ``out_dir``; returns the manifest path."""
    out_dir = Path(out_dir)
    fc_dir = out_dir / "fc"
    fc_dir.mkdir(parents=True, exist_ok=True)
    targets = cohort.target_names
    manifest = out_dir / "manifest.csv"
    with open(manifest, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["subject_id", "fc_path", "age", "sex", *targets])
        for s in cohort.subjects:
            if fc_format == "binary":
                rel = f"fc/{s.subject_id}.fcm"
                save_fc_binary(out_dir / rel, s.fc)
            elif fc_format == "csv":
                rel = f"fc/{s.subject_id}.csv"
                save_fc_csv(out_dir / rel, s.fc)
            else:
                raise DataError(f"unknown fc format: {fc_format}")
            row = [s.subject_id, rel, repr(float(s.age)), str(int(s.sex))]
            row += [repr(float(s.targets[t])) for t in targets]
            writer.writerow(row)
    return manifest


def load_cohort(manifest_path) -> Cohort:
    manifest_path = Path(manifest_path)
    if not manifest_path.is_file():
        raise DataError(f"cohort manifest not found: {manifest_path}")
    base = manifest_path.parent
    subjects = []
    with open(manifest_path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"empty cohort manifest: {manifest_path}") from None
        if header[:4] != ["subject_id", "fc_path", "age", "sex"]:
            raise DataError(
                f"{manifest_path}: header must start with subject_id,fc_path,age,sex"
            )
        target_names = header[4:]
        for row in reader:
            if not row:
                continue
            if len(row) != len(header):
                raise DataError(f"{manifest_path}: row width mismatch for {row[0]!r}")
            sid, rel, age_s, sex_s = row[:4]
            sex = int(sex_s)
            if sex not in (0, 1):
                raise DataError(f"{manifest_path}: sex must be 0/1 for {sid!r}")
            targets = {t: float(v) for t, v in zip(target_names, row[4:])}
            subjects.append(
                Subject(
                    subject_id=sid,
                    fc=load_fc(base / rel),
                    age=float(age_s),
                    sex=sex,
                    targets=targets,
                )
            )
    return Cohort(subjects=tuple(subjects))


def save_embeddings(path, subject_ids, embeddings: np.ndarray) -> None:
    """CSV with header ``subject_id,e_0..e_{d-1}``, one row per subject."""
    embeddings = np.asarray(embeddings)
    if embeddings.ndim != 2 or embeddings.shape[0] != len(subject_ids):
        raise DataError("embeddings must be (n_subjects, d)")
    d = embeddings.shape[1]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["subject_id", *[f"e_{j}" for j in range(d)]])
        for sid, row in zip(subject_ids, embeddings):
            writer.writerow([sid, *[repr(float(x)) for x in row]])


def load_embeddings(path):
    path = Path(path)
    if not path.is_file():
        raise DataError(f"embeddings file not found: {path}")
    ids = []
    rows = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[0] != "subject_id":
            raise DataError(f"{path}: expected embeddings header subject_id,e_0,...")
        for row in reader:
            if not row:
                continue
            ids.append(row[0])
            rows.append([float(x) for x in row[1:]])
    if not rows:
        raise DataError(f"{path}: no embedding rows")
    return ids, np.array(rows, dtype=np.float64)


def save_loss_curve(path, curve) -> None:
    """CSV ``epoch,loss,lr`` with epochs 1-based."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "loss", "lr"])
        for epoch, loss, lr in curve:
            writer.writerow([epoch, repr(float(loss)), repr(float(lr))])


REPORT_COLUMNS = [
    "target", "r", "ci_low", "ci_high", "delta", "p_paired", "p_perm", "n", "seed",
]


def save_report(path, rows) -> None:
    """Evaluation report CSV; rows are dicts with REPORT_COLUMNS keys."""

    def fmt(v):
        if v is None:
            return ""
        if isinstance(v, float):
            return repr(v)
        return str(v)

    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(REPORT_COLUMNS)
        for row in rows:
            writer.writerow([fmt(row.get(c)) for c in REPORT_COLUMNS])


def save_null_distribution(path, null_rs) -> None:
    """Audit dump of a permutation null distribution: CSV ``perm_index,r``."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["perm_index", "r"])
        for i, r in enumerate(null_rs):
            writer.writerow([i, repr(float(r))])
