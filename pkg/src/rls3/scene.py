"""Deterministic geometric stand-in for the rendered indoor environment.

Scenes are pairs of rectangular support surfaces plus a fixed camera. Three of
the nine catalog objects are active at a time (axis-aligned boxes); the rest
wait in a container and get swapped in. A step displaces the round-robin slot
object; valid placements (fully on a surface, base snapped to the top, no box
interpenetration) pay +1 and emit a metadata snapshot, invalid ones pay -1 and
revert.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from importlib import resources

import numpy as np

OBS_DIM = 32
CATALOG_SIZE = 9
ACTIVE_COUNT = 3

DEFAULT_DMAX = 0.25
DEFAULT_SNAP_TOL = 0.05
DEFAULT_P_SWAP = 1.0
DEFAULT_MAX_ATTEMPTS = 1000


class SceneConfigError(ValueError):
    """Malformed scene-suite config."""


class PlacementError(RuntimeError):
    """Rejection sampling could not find a valid configuration."""


class EpisodeAborted(RuntimeError):
    """Scene cycling failed to re-place the active objects."""


@dataclass(frozen=True)
class ObjectSpec:
    name: str
    half_extents: tuple[float, float, float]


@dataclass(frozen=True)
class Surface:
    top_center: tuple[float, float, float]
    half_extent_x: float
    half_extent_z: float

    @property
    def top_y(self) -> float:
        return self.top_center[1]


@dataclass(frozen=True)
class CameraPose:
    position: tuple[float, float, float]
    yaw: float
    pitch: float
    roll: float


@dataclass(frozen=True)
class SceneSpec:
    scene_id: int
    surfaces: tuple[Surface, Surface]
    camera: CameraPose


@dataclass(frozen=True)
class SceneSuite:
    catalog: tuple[ObjectSpec, ...]
    scenes: tuple[SceneSpec, ...]

    def spec(self, name: str) -> ObjectSpec:
        return self._by_name[name]

    def __post_init__(self):
        object.__setattr__(self, "_by_name", {o.name: o for o in self.catalog})

    @property
    def catalog_names(self) -> tuple[str, ...]:
        return tuple(o.name for o in self.catalog)


@dataclass(frozen=True)
class ValidityReport:
    valid: bool
    reason: str  # ok | off_surface | no_support | overlap

    def __post_init__(self):
        assert (self.reason == "ok") == self.valid


@dataclass(frozen=True)
class SceneSnapshot:
    scene_id: int
    step_index: int
    names: tuple[str, str, str]
    positions: tuple[tuple[float, float, float], ...]
    yaws: tuple[float, float, float]
    camera: CameraPose


@dataclass
class SceneState:
    scene_pos: int  # index into the suite's scene list
    active: list[str]
    positions: np.ndarray  # (3, 3) object centers
    yaws: np.ndarray  # (3,) degrees
    container: list[str]
    moved_slot: int
    camera: CameraPose
    step_index: int = 0
    valid_count: int = 0


@dataclass(frozen=True)
class StepResult:
    observation: np.ndarray
    reward: float
    done: bool
    snapshot: SceneSnapshot | None
    report: ValidityReport
    truncated: bool = False


# --- suite loading -----------------------------------------------------------


def _surfaces_overlap_plan(a: Surface, b: Surface) -> bool:
    return (
        abs(a.top_center[0] - b.top_center[0]) < a.half_extent_x + b.half_extent_x
        and abs(a.top_center[2] - b.top_center[2]) < a.half_extent_z + b.half_extent_z
    )


def suite_from_dict(doc: dict) -> SceneSuite:
    catalog = tuple(
        ObjectSpec(o["name"], tuple(float(v) for v in o["half_extents"]))
        for o in doc["catalog"]
    )
    if len(catalog) != CATALOG_SIZE:
        raise SceneConfigError(f"catalog must have {CATALOG_SIZE} entries")
    names = [o.name for o in catalog]
    if len(set(names)) != len(names):
        raise SceneConfigError("catalog names must be unique")
    for o in catalog:
        if any(h <= 0 for h in o.half_extents):
            raise SceneConfigError(f"non-positive half extents for {o.name}")

    scenes = []
    for s in doc["scenes"]:
        surfaces = tuple(
            Surface(
                tuple(float(v) for v in surf["top_center"]),
                float(surf["half_extent_x"]),
                float(surf["half_extent_z"]),
            )
            for surf in s["surfaces"]
        )
        if len(surfaces) != 2:
            raise SceneConfigError("each scene needs exactly 2 surfaces")
        for surf in surfaces:
            if surf.half_extent_x <= 0 or surf.half_extent_z <= 0:
                raise SceneConfigError("surface extents must be positive")
        if _surfaces_overlap_plan(*surfaces):
            raise SceneConfigError("surfaces overlap in plan view")
        cam = s["camera"]
        camera = CameraPose(
            tuple(float(v) for v in cam["position"]),
            float(cam["yaw"]),
            float(cam["pitch"]),
            float(cam["roll"]),
        )
        for surf in surfaces:
            cx, cy, cz = camera.position
            inside_plan = (
                abs(cx - surf.top_center[0]) < surf.half_extent_x
                and abs(cz - surf.top_center[2]) < surf.half_extent_z
            )
            if inside_plan and cy <= surf.top_y:
                raise SceneConfigError("camera inside a surface volume")
        scenes.append(SceneSpec(int(s["id"]), surfaces, camera))
    if not scenes:
        raise SceneConfigError("suite has no scenes")
    return SceneSuite(catalog, tuple(scenes))


def load_suite(path) -> SceneSuite:
    with open(path, "r", encoding="utf-8") as f:
        return suite_from_dict(json.load(f))


def builtin_suite(name: str) -> SceneSuite:
    """Checked-in suites: 'train' (5 scenes) and 'test' (3 held-out scenes)."""
    if name not in ("train", "test"):
        raise SceneConfigError(f"unknown builtin suite {name!r}")
    text = resources.files("rls3.data").joinpath(f"scenes_{name}.json").read_text()
    return suite_from_dict(json.loads(text))


# --- geometry ----------------------------------------------------------------


def boxes_interpenetrate(
    center_a: np.ndarray,
    half_a: np.ndarray,
    center_b: np.ndarray,
    half_b: np.ndarray,
) -> bool:
    """Strict-interior AABB intersection; boxes sharing a face plane do not count."""
    return bool(np.all(np.abs(np.asarray(center_a) - np.asarray(center_b)) < half_a + half_b))


def footprint_on_surface(center: np.ndarray, half: np.ndarray, surf: Surface) -> bool:
    return (
        abs(center[0] - surf.top_center[0]) + half[0] <= surf.half_extent_x
        and abs(center[2] - surf.top_center[2]) + half[2] <= surf.half_extent_z
    )


# --- environment -------------------------------------------------------------


class PlacementEnv:
    """Owns one SceneState at a time; all randomness flows through one seeded rng."""

    def __init__(
        self,
        suite: SceneSuite,
        samples_per_episode: int,
        seed: int | np.random.SeedSequence = 0,
        dmax: float = DEFAULT_DMAX,
        snap_tol: float = DEFAULT_SNAP_TOL,
        p_swap: float = DEFAULT_P_SWAP,
        max_attempts: int = DEFAULT_MAX_ATTEMPTS,
        max_steps: int | None = None,
    ):
        if samples_per_episode <= 0:
            raise ValueError("samples_per_episode must be positive")
        self.suite = suite
        self.t0 = int(samples_per_episode)
        self.t_max = int(max_steps) if max_steps is not None else 4 * self.t0
        self.dmax = float(dmax)
        self.snap_tol = float(snap_tol)
        self.p_swap = float(p_swap)
        self.max_attempts = int(max_attempts)
        self.cycle_period = math.ceil(self.t0 / len(suite.scenes))
        self._rng = np.random.default_rng(seed)
        self._state: SceneState | None = None

    # -- state access

    @property
    def state(self) -> SceneState:
        if self._state is None:
            raise RuntimeError("environment not initialized; call reset_episode")
        return self._state

    def _half(self, name: str) -> np.ndarray:
        return np.asarray(self.suite.spec(name).half_extents)

    def scene(self, state: SceneState | None = None) -> SceneSpec:
        state = state or self.state
        return self.suite.scenes[state.scene_pos]

    # -- placement sampling

    def _sample_positions(self, scene: SceneSpec, names: list[str]) -> np.ndarray:
        return sample_positions(self.suite, scene, names, self._rng, self.max_attempts)

    # -- operations

    def reset_episode(self, episode_idx: int) -> np.ndarray:
        scene_pos = episode_idx % len(self.suite.scenes)
        scene = self.suite.scenes[scene_pos]
        order = list(self._rng.permutation(CATALOG_SIZE))
        names = list(self.suite.catalog_names)
        active = [names[i] for i in order[:ACTIVE_COUNT]]
        container = [names[i] for i in order[ACTIVE_COUNT:]]
        positions = self._sample_positions(scene, active)
        yaws = self._rng.uniform(0.0, 360.0, size=ACTIVE_COUNT)
        self._state = SceneState(
            scene_pos=scene_pos,
            active=active,
            positions=positions,
            yaws=yaws,
            container=container,
            moved_slot=0,
            camera=scene.camera,
        )
        return self.observe()

    def check_placement(
        self, slot: int, candidate_position: np.ndarray, state: SceneState | None = None
    ) -> ValidityReport:
        state = state or self.state
        if slot not in (0, 1, 2):
            raise ValueError("slot must be 0, 1, or 2")
        pos = np.asarray(candidate_position, dtype=float)
        if pos.shape != (3,) or not np.isfinite(pos).all():
            return ValidityReport(False, "off_surface")
        half = self._half(state.active[slot])
        support = None
        for surf in self.scene(state).surfaces:
            if footprint_on_surface(pos, half, surf):
                support = surf
                break
        if support is None:
            return ValidityReport(False, "off_surface")
        base = pos[1] - half[1]
        if abs(base - support.top_y) > self.snap_tol:
            return ValidityReport(False, "no_support")
        snapped = pos.copy()
        snapped[1] = support.top_y + half[1]
        for other in range(ACTIVE_COUNT):
            if other == slot:
                continue
            if boxes_interpenetrate(
                snapped, half, state.positions[other], self._half(state.active[other])
            ):
                return ValidityReport(False, "overlap")
        return ValidityReport(True, "ok")

    def _snap(self, slot: int, pos: np.ndarray, state: SceneState) -> np.ndarray:
        half = self._half(state.active[slot])
        for surf in self.scene(state).surfaces:
            if footprint_on_surface(pos, half, surf):
                snapped = pos.copy()
                snapped[1] = surf.top_y + half[1]
                return snapped
        raise AssertionError("snap called for an unsupported position")

    def step(self, action) -> StepResult:
        state = self.state
        slot = state.moved_slot
        action = np.asarray(action, dtype=float)
        finite = action.shape == (3,) and bool(np.isfinite(action).all())

        # Swap decision is drawn before validity is known; reverted on failure.
        swapped_with = None
        old_y = state.positions[slot][1]
        if self._rng.random() < self.p_swap:
            swapped_with = int(self._rng.integers(len(state.container)))
            incoming = state.container[swapped_with]
            outgoing = state.active[slot]
            base = old_y - self._half(outgoing)[1]
            state.active[slot] = incoming
            state.container[swapped_with] = outgoing
            state.positions[slot][1] = base + self._half(incoming)[1]

        if finite:
            displacement = np.clip(action, -1.0, 1.0) * self.dmax
            candidate = state.positions[slot] + displacement
            report = self.check_placement(slot, candidate)
        else:
            report = ValidityReport(False, "off_surface")

        snapshot = None
        if report.valid:
            state.positions[slot] = self._snap(slot, candidate, state)
            state.valid_count += 1
            reward = 1.0
            snapshot = self.snapshot()
        else:
            reward = -1.0
            if swapped_with is not None:
                incoming = state.active[slot]
                outgoing = state.container[swapped_with]
                state.active[slot] = outgoing
                state.container[swapped_with] = incoming
                state.positions[slot][1] = old_y

        state.step_index += 1
        state.moved_slot = (slot + 1) % ACTIVE_COUNT
        done = state.valid_count >= self.t0 or state.step_index >= self.t_max
        truncated = done and state.valid_count < self.t0
        if (
            report.valid
            and not done
            and state.valid_count % self.cycle_period == 0
            and len(self.suite.scenes) > 1
        ):
            self.advance_scene()
        return StepResult(self.observe(), reward, done, snapshot, report, truncated)

    def advance_scene(self) -> None:
        state = self.state
        state.scene_pos = (state.scene_pos + 1) % len(self.suite.scenes)
        scene = self.suite.scenes[state.scene_pos]
        state.camera = scene.camera
        try:
            state.positions = self._sample_positions(scene, state.active)
        except PlacementError as exc:
            raise EpisodeAborted(
                f"re-placement failed on scene {scene.scene_id}: {exc}"
            ) from exc

    def observe(self, state: SceneState | None = None) -> np.ndarray:
        state = state or self.state
        scene = self.scene(state)
        parts = [float(state.moved_slot), float(scene.scene_id)]
        for surf in scene.surfaces:
            parts.extend(surf.top_center)
            parts.extend((surf.half_extent_x, 0.0, surf.half_extent_z))
        for i in range(ACTIVE_COUNT):
            parts.extend(state.positions[i])
        parts.extend(state.yaws)
        parts.extend(state.camera.position)
        parts.extend((state.camera.yaw, state.camera.pitch, state.camera.roll))
        obs = np.asarray(parts, dtype=np.float64)
        assert obs.shape == (OBS_DIM,) and np.isfinite(obs).all()
        return obs

    def snapshot(self, state: SceneState | None = None) -> SceneSnapshot:
        state = state or self.state
        return SceneSnapshot(
            scene_id=self.scene(state).scene_id,
            step_index=state.step_index,
            names=tuple(state.active),
            positions=tuple(tuple(float(v) for v in row) for row in state.positions),
            yaws=tuple(float(v) for v in state.yaws),
            camera=state.camera,
        )


def decode_positions(observation: np.ndarray) -> np.ndarray:
    """Inverse of the object-position block of observe(); (3, 3) centers."""
    obs = np.asarray(observation, dtype=float)
    if obs.shape != (OBS_DIM,):
        raise ValueError(f"expected a {OBS_DIM}-vector")
    return obs[14:23].reshape(3, 3).copy()


def sample_positions(
    suite: SceneSuite,
    scene: SceneSpec,
    names: list[str],
    rng: np.random.Generator,
    max_attempts: int = DEFAULT_MAX_ATTEMPTS,
) -> np.ndarray:
    """Seeded rejection sampling of non-overlapping on-surface placements."""
    placed: list[tuple[np.ndarray, np.ndarray]] = []
    positions = np.zeros((len(names), 3))
    attempts = 0
    for i, name in enumerate(names):
        half = np.asarray(suite.spec(name).half_extents)
        fitting = [
            s
            for s in scene.surfaces
            if s.half_extent_x > half[0] and s.half_extent_z > half[2]
        ]
        if not fitting:
            raise PlacementError(f"{name} fits no surface of scene {scene.scene_id}")
        while True:
            attempts += 1
            if attempts > max_attempts:
                raise PlacementError(
                    f"rejection sampling exceeded {max_attempts} attempts"
                )
            surf = fitting[int(rng.integers(len(fitting)))]
            x = rng.uniform(
                surf.top_center[0] - (surf.half_extent_x - half[0]),
                surf.top_center[0] + (surf.half_extent_x - half[0]),
            )
            z = rng.uniform(
                surf.top_center[2] - (surf.half_extent_z - half[2]),
                surf.top_center[2] + (surf.half_extent_z - half[2]),
            )
            pos = np.array([x, surf.top_y + half[1], z])
            if all(not boxes_interpenetrate(pos, half, p, h) for p, h in placed):
                break
        placed.append((pos, half))
        positions[i] = pos
    return positions


def random_snapshot(
    suite: SceneSuite,
    scene_pos: int,
    rng: np.random.Generator,
    max_attempts: int = DEFAULT_MAX_ATTEMPTS,
) -> SceneSnapshot:
    """One seeded random valid configuration, used for fixed dataset generation."""
    scene = suite.scenes[scene_pos % len(suite.scenes)]
    order = list(rng.permutation(CATALOG_SIZE))
    names = [suite.catalog_names[i] for i in order[:ACTIVE_COUNT]]
    positions = sample_positions(suite, scene, names, rng, max_attempts)
    yaws = rng.uniform(0.0, 360.0, size=ACTIVE_COUNT)
    return SceneSnapshot(
        scene_id=scene.scene_id,
        step_index=0,
        names=tuple(names),
        positions=tuple(tuple(float(v) for v in row) for row in positions),
        yaws=tuple(float(v) for v in yaws),
        camera=scene.camera,
    )
