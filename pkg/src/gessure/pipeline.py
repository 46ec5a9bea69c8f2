"""In-use state machine, macro bindings, session replay and the training phase."""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Iterable, Union

import numpy as np

from .dataset import FEATURES, FRAMES, EmbeddingDataset, GestureDataset
from .errors import ConfigError, DataError, EventError, ParseError, SetupError
from .face import (
    AUTH_THRESHOLD,
    EMBEDDING_DIM,
    MIN_USER_EMBEDDINGS,
    FaceEmbedding,
    VerifierConfig,
    VerifierModel,
    train_verifier,
    verify_frame,
)
from .model import GestureNetSpec, TrainConfig, load_model, model_to_bytes, train_gesture_classifier

log = logging.getLogger(__name__)

GESTURE_THRESHOLD = 0.80
CONTEXT_FREE_ACTIONS = ("Sleep", "Shutdown", "Restart", "LockScreen", "UnlockScreen")
DEFAULT_CONTEXT_ACTIONS = {
    "msword": ("Save", "Print", "Exit"),
    "vlc": ("Seek", "PlayPause", "Volume"),
}

BUNDLE_GESTURE = "gesture.gsrm"
BUNDLE_VERIFIER = "verifier.json"
BUNDLE_BINDINGS = "bindings.json"
BUNDLE_MANIFEST = "manifest.json"


class Phase(str, Enum):
    IDLE = "Idle"
    AWAITING_AUTH = "AwaitingAuth"
    AUTHORIZED = "Authorized"


class Screen(str, Enum):
    LOCKED = "Locked"
    UNLOCKED = "Unlocked"


@dataclass(frozen=True)
class SessionState:
    phase: Phase = Phase.IDLE
    screen: Screen = Screen.UNLOCKED
    active_context: str | None = None
    buffer: tuple = ()

    def __post_init__(self):
        if len(self.buffer) > FRAMES:
            raise ValueError(f"frame buffer holds at most {FRAMES} frames")


# --- events -------------------------------------------------------------------

@dataclass(frozen=True)
class Toggle:
    on: bool


@dataclass(frozen=True)
class FaceFrame:
    faces: tuple = ()


@dataclass(frozen=True)
class HandFrame:
    coords: tuple


@dataclass(frozen=True)
class ContextChange:
    app: str | None


SessionEvent = Union[Toggle, FaceFrame, HandFrame, ContextChange]


@dataclass(frozen=True)
class ActionEvent:
    idx: int
    action: str
    context: str | None

    def to_dict(self) -> dict:
        return {"idx": self.idx, "action": self.action, "context": self.context}


# --- bindings -----------------------------------------------------------------

@dataclass
class BindingTable:
    """Gesture class -> action, either context-free (key ``None``) or per context."""

    num_classes: int = 6
    garbage: int = 5
    entries: dict[int, dict[str | None, str]] = field(default_factory=dict)

    def __post_init__(self):
        if not 0 <= self.garbage < self.num_classes:
            raise ConfigError("garbage class must be one of the classes")

    def lookup(self, cls: int, context: str | None) -> tuple[str, str | None] | None:
        """Resolve to ``(action, context the action applies to)`` or ``None``."""
        actions = self.entries.get(cls)
        if not actions:
            return None
        if context is not None and context in actions:
            return actions[context], context
        if None in actions:
            return actions[None], None
        if context is None and "Exit" in actions.values():
            return "Shutdown", None
        return None

    def copy(self) -> "BindingTable":
        return BindingTable(self.num_classes, self.garbage, {k: dict(v) for k, v in self.entries.items()})

    def to_dict(self) -> dict:
        rows = []
        for cls in sorted(self.entries):
            for ctx, action in sorted(self.entries[cls].items(), key=lambda kv: (kv[0] is not None, kv[0] or "")):
                rows.append({"class": cls, "context": ctx, "action": action})
        return {"num_classes": self.num_classes, "garbage": self.garbage, "bindings": rows}

    @classmethod
    def from_dict(cls, data: dict) -> "BindingTable":
        table = cls(int(data["num_classes"]), int(data["garbage"]))
        for row in data["bindings"]:
            table = register_binding(table, int(row["class"]), row["context"], row["action"])
        return table


def register_binding(table: BindingTable, cls: int, context: str | None, action: str) -> BindingTable:
    """Return a copy of ``table`` with ``cls`` bound to ``action`` under ``context``.

    ``context=None`` makes the binding context-free. Rebinding replaces the old entry.
    """
    if not 0 <= cls < table.num_classes:
        raise ConfigError(f"class {cls} out of range for {table.num_classes} classes")
    if cls == table.garbage:
        raise ConfigError(f"class {cls} is the garbage class and cannot be bound")
    if not action:
        raise ConfigError("action name must be non-empty")
    if context is None and action not in CONTEXT_FREE_ACTIONS:
        raise ConfigError(f"{action!r} is not a context-free action")
    out = table.copy()
    slot = out.entries.setdefault(cls, {})
    if context in slot and slot[context] != action:
        log.info("rebinding class %d in %s: %s -> %s", cls, context or "any context", slot[context], action)
    slot[context] = action
    return out


def default_bindings(num_classes: int = 6, garbage: int | None = None) -> BindingTable:
    """Three context gestures (msword/vlc), screen lock and unlock."""
    garbage = num_classes - 1 if garbage is None else garbage
    table = BindingTable(num_classes, garbage)
    usable = [c for c in range(num_classes) if c != garbage]
    if len(usable) < 5:
        raise ConfigError("default bindings need five non-garbage classes")
    for slot, cls in enumerate(usable[:3]):
        for ctx, actions in DEFAULT_CONTEXT_ACTIONS.items():
            table = register_binding(table, cls, ctx, actions[slot])
    table = register_binding(table, usable[3], None, "LockScreen")
    return register_binding(table, usable[4], None, "UnlockScreen")


# --- engine -------------------------------------------------------------------

@dataclass(frozen=True)
class PipelineConfig:
    auth_threshold: float = AUTH_THRESHOLD
    gesture_threshold: float = GESTURE_THRESHOLD

    def __post_init__(self):
        for name in ("auth_threshold", "gesture_threshold"):
            v = getattr(self, name)
            if not 0.0 < v < 1.0:
                raise ConfigError(f"{name} must lie in (0, 1), got {v}")


@dataclass
class Models:
    """The two trained models the state machine consults.

    ``gesture`` only needs ``predict_proba((1, 20, 63)) -> (1, classes)``.
    """

    gesture: object
    verifier: VerifierModel
    garbage: int | None = None

    def __post_init__(self):
        if self.garbage is None:
            self.garbage = self.gesture.spec.garbage


def _check_event(event, index: int | None = None) -> None:
    if isinstance(event, HandFrame):
        n = np.size(event.coords)
        if n != FEATURES:
            raise EventError(f"hand frame has {n} values, expected {FEATURES}", index)
    elif isinstance(event, FaceFrame):
        for face in event.faces:
            vec = face.vector if isinstance(face, FaceEmbedding) else face
            if np.size(vec) != EMBEDDING_DIM:
                raise EventError(f"face embedding has {np.size(vec)} values, expected {EMBEDDING_DIM}", index)
    elif isinstance(event, Toggle):
        if not isinstance(event.on, (bool, np.bool_)):
            raise EventError("toggle needs a boolean 'on'", index)
    elif isinstance(event, ContextChange):
        if event.app is not None and not isinstance(event.app, str):
            raise EventError("context must be a string or null", index)
    else:
        raise EventError(f"unknown event type {type(event).__name__}", index)


def step(
    state: SessionState,
    event: SessionEvent,
    models: Models,
    bindings: BindingTable,
    config: PipelineConfig = PipelineConfig(),
    index: int = 0,
) -> tuple[SessionState, list[ActionEvent]]:
    """Advance the session by one event; ``index`` stamps any emitted action."""
    _check_event(event, index)

    if isinstance(event, Toggle):
        if event.on:
            if state.phase is Phase.IDLE:
                return replace(state, phase=Phase.AWAITING_AUTH), []
            return state, []
        return replace(state, phase=Phase.IDLE, buffer=()), []

    if isinstance(event, ContextChange):
        return replace(state, active_context=event.app), []

    if isinstance(event, FaceFrame):
        if state.phase is Phase.IDLE:
            return state, []
        if verify_frame(models.verifier, event.faces, config.auth_threshold).authorized:
            return replace(state, phase=Phase.AUTHORIZED), []
        return replace(state, phase=Phase.AWAITING_AUTH, buffer=()), []

    # HandFrame
    if state.phase is not Phase.AUTHORIZED:
        return state, []
    buffer = state.buffer + (tuple(np.asarray(event.coords, dtype=np.float64).reshape(FEATURES).tolist()),)
    if len(buffer) < FRAMES:
        return replace(state, buffer=buffer), []

    state = replace(state, buffer=())
    probs = np.asarray(models.gesture.predict_proba(np.array(buffer)[None]))[0]
    cls = int(np.argmax(probs))
    if cls == models.garbage or probs[cls] < config.gesture_threshold:
        return state, []
    resolved = bindings.lookup(cls, state.active_context)
    if resolved is None:
        return state, []
    action, ctx = resolved
    if state.screen is Screen.LOCKED and action != "UnlockScreen":
        return state, []
    if action == "LockScreen":
        state = replace(state, screen=Screen.LOCKED)
    elif action == "UnlockScreen":
        state = replace(state, screen=Screen.UNLOCKED)
    return state, [ActionEvent(index, action, ctx)]


def replay(
    events: Iterable[SessionEvent],
    models: Models,
    bindings: BindingTable,
    config: PipelineConfig = PipelineConfig(),
    state: SessionState | None = None,
    start: int = 0,
) -> tuple[list[ActionEvent], SessionState]:
    """Fold ``step`` over ``events``; pass ``state``/``start`` to continue a session."""
    state = SessionState() if state is None else state
    out: list[ActionEvent] = []
    for i, event in enumerate(events, start=start):
        state, emitted = step(state, event, models, bindings, config, i)
        out.extend(emitted)
    return out, state


# --- session files ------------------------------------------------------------

def parse_event(record, index: int | None = None) -> SessionEvent:
    if not isinstance(record, dict):
        raise EventError("event must be a JSON object", index)
    kind = record.get("ev")
    try:
        if kind == "toggle":
            event = Toggle(record["on"])
        elif kind == "face":
            event = FaceFrame(tuple(np.asarray(f, dtype=np.float64) for f in record["faces"]))
        elif kind == "hand":
            event = HandFrame(tuple(float(v) for v in record["coords"]))
        elif kind == "context":
            event = ContextChange(record["app"])
        else:
            raise EventError(f"unknown event kind {kind!r}", index)
    except KeyError as exc:
        raise EventError(f"{kind} event is missing {exc.args[0]!r}", index) from None
    except (TypeError, ValueError) as exc:
        if isinstance(exc, EventError):
            raise
        raise EventError(f"{kind} event has non-numeric values", index) from None
    _check_event(event, index)
    return event


def event_to_dict(event: SessionEvent) -> dict:
    if isinstance(event, Toggle):
        return {"ev": "toggle", "on": bool(event.on)}
    if isinstance(event, FaceFrame):
        faces = [f.vector if isinstance(f, FaceEmbedding) else f for f in event.faces]
        return {"ev": "face", "faces": [np.asarray(f, dtype=np.float64).tolist() for f in faces]}
    if isinstance(event, HandFrame):
        return {"ev": "hand", "coords": np.asarray(event.coords, dtype=np.float64).tolist()}
    if isinstance(event, ContextChange):
        return {"ev": "context", "app": event.app}
    raise EventError(f"unknown event type {type(event).__name__}")


def load_session(path) -> list[SessionEvent]:
    """Read a session JSONL file; blank lines are skipped but still not counted."""
    events = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"malformed JSON ({exc.msg})", lineno) from None
            try:
                events.append(parse_event(record, len(events)))
            except EventError as exc:
                raise ParseError(str(exc), lineno) from None
    return events


def save_session(events: Iterable[SessionEvent], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for event in events:
            fh.write(json.dumps(event_to_dict(event), separators=(",", ":")) + "\n")


def format_action_log(actions: Iterable[ActionEvent]) -> str:
    return "".join(json.dumps(a.to_dict(), separators=(",", ":")) + "\n" for a in actions)


# --- bundles / training phase -------------------------------------------------

def _dump_json(obj) -> bytes:
    return (json.dumps(obj, sort_keys=True, indent=1) + "\n").encode("utf-8")


def write_bundle_files(directory, files: dict[str, bytes], settings: dict | None = None) -> Path:
    """Write ``files`` into ``directory`` and refresh the manifest (name -> sha256).

    Entries for files already listed in an existing manifest are kept, so the
    gesture and face halves of a bundle can be trained separately.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest_path = directory / BUNDLE_MANIFEST
    manifest = {"format": "gessure-bundle", "version": 1, "files": {}, "settings": {}}
    if manifest_path.exists():
        try:
            old = json.loads(manifest_path.read_text(encoding="utf-8"))
            manifest["files"].update(old.get("files", {}))
            manifest["settings"].update(old.get("settings", {}))
        except json.JSONDecodeError:
            raise DataError(f"{manifest_path}: manifest is not valid JSON") from None
    for name, data in sorted(files.items()):
        (directory / name).write_bytes(data)
        manifest["files"][name] = hashlib.sha256(data).hexdigest()
    manifest["settings"].update(settings or {})
    manifest_path.write_bytes(_dump_json(manifest))
    return directory


@dataclass
class Bundle:
    models: Models
    bindings: BindingTable


def load_bundle(directory) -> Bundle:
    directory = Path(directory)
    manifest_path = directory / BUNDLE_MANIFEST
    if not manifest_path.exists():
        raise FileNotFoundError(f"{directory}: no {BUNDLE_MANIFEST}")
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    files = manifest.get("files", {})
    for name in (BUNDLE_GESTURE, BUNDLE_VERIFIER, BUNDLE_BINDINGS):
        if name not in files:
            raise SetupError(f"bundle {directory} has no {name}; train both models first")
        data = (directory / name).read_bytes()
        if hashlib.sha256(data).hexdigest() != files[name]:
            raise DataError(f"{name} does not match its manifest checksum")
    net = load_model(directory / BUNDLE_GESTURE)
    verifier = VerifierModel.load(directory / BUNDLE_VERIFIER)
    bindings = BindingTable.from_dict(json.loads((directory / BUNDLE_BINDINGS).read_text(encoding="utf-8")))
    if bindings.num_classes != net.spec.classes or bindings.garbage != net.spec.garbage:
        raise ConfigError("binding table does not match the gesture model's classes")
    return Bundle(Models(net, verifier), bindings)


def gesture_bundle_files(net, bindings: BindingTable) -> dict[str, bytes]:
    return {BUNDLE_GESTURE: model_to_bytes(net), BUNDLE_BINDINGS: _dump_json(bindings.to_dict())}


def verifier_bundle_files(verifier: VerifierModel) -> dict[str, bytes]:
    return {BUNDLE_VERIFIER: _dump_json(verifier.to_dict())}


def run_training_phase(
    enrollment: EmbeddingDataset,
    user: str,
    gestures: GestureDataset,
    bindings: BindingTable | None = None,
    directory=None,
    spec: GestureNetSpec | None = None,
    train_config: TrainConfig = TrainConfig(),
    verifier_config: VerifierConfig = VerifierConfig(),
) -> Bundle:
    """Enroll the user, train the gesture net, and optionally persist a bundle."""
    n_user = sum(1 for i in enrollment.identities if i == user)
    if n_user < MIN_USER_EMBEDDINGS:
        raise SetupError(f"face enrollment is mandatory: {n_user} embeddings of {user!r}, need {MIN_USER_EMBEDDINGS}")
    spec = spec or GestureNetSpec()
    bindings = bindings or default_bindings(spec.classes, spec.garbage)
    if bindings.num_classes != spec.classes or bindings.garbage != spec.garbage:
        raise ConfigError("binding table does not match the gesture model's classes")
    verifier = train_verifier(enrollment, user, verifier_config)
    net, _ = train_gesture_classifier(gestures, spec, train_config)
    if directory is not None:
        files = {**gesture_bundle_files(net, bindings), **verifier_bundle_files(verifier)}
        write_bundle_files(directory, files, {"gesture_seed": train_config.seed, "face_seed": verifier_config.seed})
    return Bundle(Models(net, verifier), bindings)
