"""Run directories: summary, per-step trajectory, checkpoint and a hashed manifest."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import os
from importlib import metadata
from pathlib import Path

TRAJECTORY_COLUMNS = ("t", "age", "D", "M", "S", "load", "reward", "s_dom", "efforts", "termination")


def tool_version() -> str:
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        return "unknown"


def atomic_write_bytes(path: str | Path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(data)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


def atomic_write_json(path: str | Path, obj) -> None:
    atomic_write_bytes(path, (json.dumps(obj, indent=2, sort_keys=True) + "\n").encode())


def trajectory_csv(steps: list[dict]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(TRAJECTORY_COLUMNS)
    for s in steps:
        writer.writerow(
            [
                s["t"],
                repr(float(s["age"])),
                repr(float(s["D"])),
                repr(float(s["M"])),
                repr(float(s["S"])),
                repr(float(s["load"])),
                repr(float(s["reward"])),
                repr(float(s["s_dom"])),
                ";".join(repr(float(e)) for e in s["efforts"]),
                s["termination"],
            ]
        )
    return buf.getvalue()


def read_trajectory_csv(path: str | Path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def file_sha256(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_artifacts(
    directory: str | Path,
    *,
    config_hash: str,
    summary: dict | None = None,
    trajectory: list[dict] | None = None,
    checkpoint: bytes | None = None,
    extra_files: dict[str, bytes] | None = None,
    config_echo: dict | None = None,
) -> dict:
    """Write the run outputs atomically and return the manifest (also written).

    Every JSON artifact embeds ``config_hash``; the manifest lists each file
    with its sha256.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    files: dict[str, bytes] = {}
    if config_echo is not None:
        files["config.json"] = (json.dumps({**config_echo, "config_hash": config_hash}, indent=2, sort_keys=True) + "\n").encode()
    if summary is not None:
        if summary.get("config_hash", config_hash) != config_hash:
            raise ValueError("summary was produced from a different configuration")
        files["summary.json"] = (json.dumps({**summary, "config_hash": config_hash}, indent=2, sort_keys=True) + "\n").encode()
    if trajectory is not None:
        files["trajectory.csv"] = trajectory_csv(trajectory).encode()
    if checkpoint is not None:
        files["checkpoint.pt"] = checkpoint
    files.update(extra_files or {})

    for name, data in files.items():
        atomic_write_bytes(directory / name, data)
    manifest = {
        "config_hash": config_hash,
        "tool_version": tool_version(),
        "files": {name: hashlib.sha256(data).hexdigest() for name, data in sorted(files.items())},
    }
    atomic_write_json(directory / "manifest.json", manifest)
    return manifest


def verify_manifest(directory: str | Path) -> list[str]:
    """Files whose content no longer matches the manifest."""
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    return [name for name, digest in manifest["files"].items() if file_sha256(directory / name) != digest]
