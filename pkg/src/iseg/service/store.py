"""Event-sourced session state.

The ordered click/undo/propagate log plus the uploaded pixels are the
source of truth; every mask is a deterministic replay of a log prefix,
so cached mask PNGs can always be regenerated byte-identically (e.g.
after a crash). Mutations per session are serialized by a lock; reads
only take it briefly to snapshot.
"""

from __future__ import annotations

import json
import os
import threading
import uuid
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from ..errors import IsegError, OutOfBoundsClick
from ..masks import Click, binarize, encode_clicks, load_gray, mask_png_bytes, \
    save_gray
from ..model import ModelConfig, forward
from ..propagation import PropagationConfig, propagate_volume

DEFAULT_MAX_PAYLOAD = 64 * 1024 * 1024


class SessionNotFound(IsegError):
    pass


class ConflictError(IsegError):
    """Mutation not applicable in the current state (HTTP 409)."""


class UnprocessableError(IsegError):
    """Semantically invalid request (HTTP 422)."""


def _now() -> str:
    return datetime.now(timezone.utc).isoformat()


def _atomic_write(path: Path, data: bytes) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


class Session:
    """One interactive annotation session over an image or volume."""

    def __init__(self, session_id: str, root: Path, volume: np.ndarray,
                 kind: str, weights_ref: str, created_at: str | None = None,
                 config: dict | None = None):
        self.id = session_id
        self.root = root
        self.volume = volume                      # (D, H, W) float in [0,1]
        self.kind = kind
        self.weights_ref = weights_ref
        self.config = config or {}
        self.created_at = created_at or _now()
        self.updated_at = self.created_at
        self.active_slice = 0
        self.lock = threading.Lock()

        self.events: list[dict] = []
        self.clicks: dict[int, list[Click]] = {}
        self.versions: dict[int, int] = {}
        self.propagation: dict | None = None
        self._mask_cache: dict[tuple[int, int], bytes] = {}

    @property
    def depth(self) -> int:
        return self.volume.shape[0]

    @property
    def height(self) -> int:
        return self.volume.shape[1]

    @property
    def width(self) -> int:
        return self.volume.shape[2]

    def version_of(self, slice_k: int) -> int:
        return self.versions.get(slice_k, 0)


class SessionStore:
    def __init__(self, data_dir: str | Path, weights, model_config: ModelConfig,
                 weights_ref: str = "weights",
                 prop_defaults: PropagationConfig | None = None):
        self.root = Path(data_dir) / "sessions"
        self.root.mkdir(parents=True, exist_ok=True)
        self.weights = weights
        self.model_config = model_config
        self.weights_ref = weights_ref
        self.prop_defaults = prop_defaults or PropagationConfig()
        self._sessions: dict[str, Session] = {}
        self._lock = threading.Lock()

    # -- creation / loading ------------------------------------------------

    def create(self, volume: np.ndarray, kind: str,
               config: dict | None = None) -> Session:
        d, h, w = volume.shape
        self.model_config.check_input_dims(h, w)
        session = Session(uuid.uuid4().hex, self.root, volume, kind,
                          self.weights_ref, config=config)
        sdir = self.root / session.id
        (sdir / "slices").mkdir(parents=True, exist_ok=True)
        for i in range(d):
            save_gray(sdir / "slices" / f"{i:03d}.png", volume[i])
        (sdir / "masks").mkdir(exist_ok=True)
        self._write_meta(session)
        self._write_events(session)
        with self._lock:
            self._sessions[session.id] = session
        return session

    def get(self, session_id: str) -> Session:
        with self._lock:
            if session_id in self._sessions:
                return self._sessions[session_id]
        session = self._load(session_id)
        with self._lock:
            return self._sessions.setdefault(session_id, session)

    def _load(self, session_id: str) -> Session:
        sdir = self.root / session_id
        meta_path = sdir / "meta.json"
        if not meta_path.exists():
            raise SessionNotFound(session_id)
        meta = json.loads(meta_path.read_text())
        slice_files = sorted((sdir / "slices").glob("*.png"))
        volume = np.stack([load_gray(f) for f in slice_files])
        session = Session(session_id, self.root, volume, meta["kind"],
                          meta.get("weights_ref", self.weights_ref),
                          created_at=meta["created_at"],
                          config=meta.get("config") or {})
        session.updated_at = meta.get("updated_at", session.created_at)
        session.active_slice = meta.get("active_slice", 0)
        events_path = sdir / "clicks.json"
        events = json.loads(events_path.read_text()) if events_path.exists() else []
        for ev in events:
            self._fold_event(session, ev)
        session.events = events
        if session.propagation is None and meta.get("propagation"):
            session.propagation = meta["propagation"]
        return session

    # -- event folding -----------------------------------------------------

    def _fold_event(self, session: Session, ev: dict) -> None:
        """Update derived click/version state (no mask computation)."""
        op = ev["op"]
        if op == "click":
            k = ev["slice"]
            session.clicks.setdefault(k, []).append(Click(
                row=ev["row"], col=ev["col"],
                positive=ev["polarity"] == "positive",
                ordinal=len(session.clicks.get(k, []))))
            session.versions[k] = session.version_of(k) + 1
            session.active_slice = k
        elif op == "undo":
            k = ev["slice"]
            session.clicks[k].pop()
            session.versions[k] = session.version_of(k) + 1
        elif op == "propagate":
            for k in range(session.depth):
                session.versions[k] = session.version_of(k) + 1
            session.propagation = {"status": "done", "seeds": ev["seeds"],
                                   "provenance": ev.get("provenance", {})}
        else:
            raise IsegError(f"unknown event op {op!r}")

    # -- prediction helpers --------------------------------------------------

    def _predict_mask(self, session: Session, slice_k: int,
                      clicks: list[Click]) -> np.ndarray:
        h, w = session.height, session.width
        clickmap = encode_clicks(clicks, h, w, self.model_config.click_radius)
        prob = forward(session.volume[slice_k], clickmap, self.weights,
                       self.model_config)
        return binarize(prob)

    def _prop_config(self, session: Session,
                     seeds: list[tuple[int, np.ndarray]]) -> PropagationConfig:
        cfg = session.config or {}
        return PropagationConfig(
            feature_source=cfg.get("feature_source",
                                   self.prop_defaults.feature_source),
            top_k=int(cfg.get("top_k", self.prop_defaults.top_k)),
            memory_capacity=int(cfg.get("memory_capacity",
                                        self.prop_defaults.memory_capacity)),
            key_patch=int(cfg.get("key_patch", self.prop_defaults.key_patch)),
            seed_slices=seeds,
        )

    def _run_propagation(self, session: Session,
                         clicks_state: dict[int, list[Click]],
                         seed_idxs: list[int]) -> tuple[np.ndarray, dict[int, int]]:
        seeds = [(k, self._predict_mask(session, k, clicks_state[k]))
                 for k in seed_idxs]
        cfg = self._prop_config(session, seeds)
        return propagate_volume(session.volume, cfg, self.weights,
                                self.model_config)

    # -- mask retrieval (any version, replayable) ----------------------------

    def mask_png(self, session: Session, slice_k: int,
                 version: int | None = None) -> tuple[bytes, int]:
        if not 0 <= slice_k < session.depth:
            raise UnprocessableError(f"slice {slice_k} outside volume")
        with session.lock:
            current = session.version_of(slice_k)
            events = list(session.events)
        v = current if version is None else version
        if v < 0 or v > current:
            raise SessionNotFound(f"version {v} does not exist for slice {slice_k}")
        key = (slice_k, v)
        if key in session._mask_cache:
            return session._mask_cache[key], v
        png_path = session_dir_mask(self.root, session.id, slice_k, v)
        if png_path.exists():
            data = png_path.read_bytes()
            session._mask_cache[key] = data
            return data, v
        mask = self._replay_mask(session, events, slice_k, v)
        data = mask_png_bytes(mask)
        self._cache_mask(session, slice_k, v, data)
        return data, v

    def _replay_mask(self, session: Session, events: list[dict],
                     slice_k: int, version: int) -> np.ndarray:
        clicks_state: dict[int, list[Click]] = {}
        if version == 0:
            return self._predict_mask(session, slice_k, [])
        count = 0
        for ev in events:
            op = ev["op"]
            if op == "click":
                k = ev["slice"]
                clicks_state.setdefault(k, []).append(Click(
                    row=ev["row"], col=ev["col"],
                    positive=ev["polarity"] == "positive",
                    ordinal=len(clicks_state.get(k, []))))
                touched = k == slice_k
            elif op == "undo":
                k = ev["slice"]
                clicks_state[k].pop()
                touched = k == slice_k
            else:
                touched = True
            if touched:
                count += 1
                if count == version:
                    if op == "propagate":
                        masks, _prov = self._run_propagation(
                            session, clicks_state, ev["seeds"])
                        return masks[slice_k]
                    return self._predict_mask(session, slice_k,
                                              clicks_state.get(slice_k, []))
        raise SessionNotFound(f"version {version} does not exist")

    def _cache_mask(self, session: Session, slice_k: int, version: int,
                    png: bytes) -> None:
        session._mask_cache[(slice_k, version)] = png
        path = session_dir_mask(self.root, session.id, slice_k, version)
        path.parent.mkdir(parents=True, exist_ok=True)
        _atomic_write(path, png)

    # -- mutations -----------------------------------------------------------

    def add_click(self, session: Session, slice_k: int, row: int, col: int,
                  polarity: str) -> int:
        with session.lock:
            if not 0 <= slice_k < session.depth:
                raise UnprocessableError(f"slice {slice_k} outside volume")
            if not (0 <= row < session.height and 0 <= col < session.width):
                raise UnprocessableError(
                    f"click ({row},{col}) outside {session.height}x{session.width}")
            ev = {"op": "click", "slice": slice_k, "row": int(row),
                  "col": int(col), "polarity": polarity, "at": _now()}
            session.events.append(ev)
            self._fold_event(session, ev)
            version = session.version_of(slice_k)
            try:
                mask = self._predict_mask(session, slice_k,
                                          session.clicks[slice_k])
            except OutOfBoundsClick as e:  # defensive; bounds checked above
                raise UnprocessableError(str(e)) from e
            self._cache_mask(session, slice_k, version, mask_png_bytes(mask))
            session.updated_at = _now()
            self._write_events(session)
            self._write_meta(session)
            return version

    def undo_click(self, session: Session, slice_k: int) -> int:
        with session.lock:
            if not session.clicks.get(slice_k):
                raise ConflictError(f"no clicks to undo on slice {slice_k}")
            ev = {"op": "undo", "slice": slice_k, "at": _now()}
            session.events.append(ev)
            self._fold_event(session, ev)
            version = session.version_of(slice_k)
            mask = self._predict_mask(session, slice_k,
                                      session.clicks.get(slice_k, []))
            self._cache_mask(session, slice_k, version, mask_png_bytes(mask))
            session.updated_at = _now()
            self._write_events(session)
            self._write_meta(session)
            return version

    def propagate(self, session: Session,
                  seed_slices: list[int] | None) -> dict[int, int]:
        with session.lock:
            if session.kind != "volume":
                raise UnprocessableError("propagation needs a volume session")
            seeds = (sorted(seed_slices) if seed_slices
                     else sorted(k for k, cl in session.clicks.items() if cl))
            if not seeds:
                raise ConflictError("no seed slices with clicks")
            for k in seeds:
                if not 0 <= k < session.depth:
                    raise UnprocessableError(f"seed slice {k} outside volume")
                if not session.clicks.get(k):
                    raise ConflictError(f"seed slice {k} has no clicks")
            masks, provenance = self._run_propagation(session, session.clicks,
                                                      seeds)
            ev = {"op": "propagate", "seeds": seeds,
                  "provenance": {str(k): v for k, v in provenance.items()},
                  "at": _now()}
            session.events.append(ev)
            self._fold_event(session, ev)
            for k in range(session.depth):
                self._cache_mask(session, k, session.version_of(k),
                                 mask_png_bytes(masks[k]))
            session.updated_at = _now()
            self._write_events(session)
            self._write_meta(session)
            return provenance

    # -- persistence ---------------------------------------------------------

    def _write_meta(self, session: Session) -> None:
        meta = {
            "id": session.id,
            "kind": session.kind,
            "depth": session.depth,
            "height": session.height,
            "width": session.width,
            "created_at": session.created_at,
            "updated_at": session.updated_at,
            "active_slice": session.active_slice,
            "weights_ref": session.weights_ref,
            "config": session.config,
            "propagation": session.propagation,
        }
        _atomic_write(self.root / session.id / "meta.json",
                      json.dumps(meta, indent=1).encode())

    def _write_events(self, session: Session) -> None:
        _atomic_write(self.root / session.id / "clicks.json",
                      json.dumps(session.events, indent=1).encode())


def session_dir_mask(root: Path, session_id: str, slice_k: int,
                     version: int) -> Path:
    return root / session_id / "masks" / f"s{slice_k:03d}_v{version:06d}.png"
