"""Deterministic planar tabletop world with two synthetic camera views.

The workspace is the unit square; the gripper is a point at (x, y) with a
scalar height z and an aperture, all in [0, 1]. Objects are colored disks,
receptacles are larger dimmer disks, and physics is kinematic: an object
attaches when the aperture closes near it at low height, tracks the gripper
while held, and stays wherever it is released. A scripted expert solves the
two task kinds (poke, pick-and-place) with a state-derived waypoint script,
so it needs no memory beyond the world state itself.

Cameras are orthographic. The third view covers the whole workspace; the
wrist view covers a small window centered on the gripper.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

# Object classes are saturated, receptacles dimmer, the gripper marker is
# pure white: per-pixel brightness then ranks marker > object > receptacle,
# which the trace tooling relies on to localize the gripper in renders.
OBJECT_PALETTE = np.array(
    [
        [0.95, 0.15, 0.15],
        [0.15, 0.95, 0.15],
        [0.20, 0.35, 0.95],
        [0.95, 0.85, 0.10],
        [0.90, 0.20, 0.90],
        [0.10, 0.90, 0.90],
        [0.95, 0.55, 0.10],
        [0.55, 0.95, 0.35],
        [0.45, 0.20, 0.90],
        [0.95, 0.35, 0.55],
        [0.60, 0.60, 0.95],
        [0.75, 0.95, 0.10],
    ],
    dtype=np.float32,
)
RECEPTACLE_PALETTE = np.array(
    [
        [0.50, 0.25, 0.25],
        [0.25, 0.50, 0.25],
        [0.25, 0.30, 0.50],
        [0.50, 0.45, 0.20],
        [0.45, 0.25, 0.45],
        [0.25, 0.50, 0.50],
    ],
    dtype=np.float32,
)
BACKGROUND_COLOR = np.array([0.08, 0.08, 0.10], dtype=np.float32)
MARKER_COLOR = np.array([1.0, 1.0, 1.0], dtype=np.float32)


class SimError(RuntimeError):
    pass


class PlacementError(SimError):
    """Rejection sampling could not place all entities without overlap."""


class InfeasibleTaskError(SimError):
    """The task's target class is absent from the scene."""


@dataclass(frozen=True)
class SimParams:
    """World constants. Defaults size episodes at roughly 25-80 steps."""

    third_resolution: int = 32
    wrist_resolution: int = 16
    wrist_window: float = 0.25
    delta_max: float = 0.05
    grasp_radius: float = 0.06
    z_grasp: float = 0.2
    close_threshold: float = 0.3
    open_threshold: float = 0.7
    poke_displacement: float = 0.03
    z_contact: float = 0.1
    object_radius: float = 0.05
    receptacle_radius: float = 0.11
    placement_margin: float = 0.03
    n_object_classes: int = 12
    n_receptacle_classes: int = 6
    home_pose: tuple[float, float, float, float] = (0.5, 0.5, 0.5, 0.9)
    marker_radius: float = 0.024


@dataclass(frozen=True)
class CameraModel:
    view: str  # "third" or "wrist"
    resolution: int
    window: float = 1.0  # width of the viewed world square

    def __post_init__(self):
        if self.view not in ("third", "wrist"):
            raise ValueError(f"unknown camera view '{self.view}'")
        if self.resolution < 8:
            raise ValueError(f"camera resolution {self.resolution} < 8")
        if not 0.0 < self.window <= 1.0:
            raise ValueError(f"camera window {self.window} outside (0, 1]")


def third_camera(params: SimParams) -> CameraModel:
    return CameraModel("third", params.third_resolution, 1.0)


def wrist_camera(params: SimParams) -> CameraModel:
    return CameraModel("wrist", params.wrist_resolution, params.wrist_window)


@dataclass(frozen=True)
class TaskSpec:
    kind: str  # "poke" or "pick_place"
    target_object_class: int
    target_receptacle_class: int | None = None

    def __post_init__(self):
        if self.kind == "poke":
            if self.target_receptacle_class is not None:
                raise ValueError("poke tasks take no receptacle class")
        elif self.kind == "pick_place":
            if self.target_receptacle_class is None:
                raise ValueError("pick_place tasks require a receptacle class")
        else:
            raise ValueError(f"unknown task kind '{self.kind}'")

    @property
    def label(self) -> str:
        if self.kind == "poke":
            return f"poke_c{self.target_object_class}"
        return f"place_c{self.target_object_class}_r{self.target_receptacle_class}"


@dataclass(frozen=True)
class SceneEntity:
    class_id: int
    position: tuple[float, float]
    radius: float


class Action:
    """Bounded pose delta (dx, dy, dz, dg), clipped at construction."""

    __slots__ = ("deltas",)

    def __init__(self, deltas, delta_max: float):
        self.deltas = np.clip(np.asarray(deltas, dtype=np.float64), -delta_max, delta_max)

    def __repr__(self) -> str:
        return f"Action({self.deltas.tolist()})"


@dataclass
class WorldState:
    gripper: np.ndarray  # (4,) x, y, z, aperture
    objects: list[SceneEntity]
    receptacles: list[SceneEntity]
    held_object: int | None
    step_count: int
    # Scoring bookkeeping, updated by step(): initial positions for the
    # displacement test, sticky contact/held/released flags so scores are
    # monotone within an episode.
    initial_object_positions: np.ndarray  # (n_obj, 2)
    poked: np.ndarray  # (n_obj,) bool
    ever_held: np.ndarray  # (n_obj,) bool
    released_inside: np.ndarray  # (n_obj, n_rec) bool

    def copy(self) -> "WorldState":
        return WorldState(
            gripper=self.gripper.copy(),
            objects=list(self.objects),
            receptacles=list(self.receptacles),
            held_object=self.held_object,
            step_count=self.step_count,
            initial_object_positions=self.initial_object_positions.copy(),
            poked=self.poked.copy(),
            ever_held=self.ever_held.copy(),
            released_inside=self.released_inside.copy(),
        )


def make_state(params: SimParams, objects: list[SceneEntity], receptacles: list[SceneEntity]) -> WorldState:
    return WorldState(
        gripper=np.array(params.home_pose, dtype=np.float64),
        objects=objects,
        receptacles=receptacles,
        held_object=None,
        step_count=0,
        initial_object_positions=np.array([e.position for e in objects], dtype=np.float64).reshape(len(objects), 2),
        poked=np.zeros(len(objects), dtype=bool),
        ever_held=np.zeros(len(objects), dtype=bool),
        released_inside=np.zeros((len(objects), len(receptacles)), dtype=bool),
    )


def _sample_position(rng: np.random.Generator, radius: float, placed: list[SceneEntity], margin: float) -> tuple[float, float] | None:
    edge = radius + 0.02
    for _ in range(200):
        pos = rng.uniform(edge, 1.0 - edge, size=2)
        ok = True
        for other in placed:
            min_dist = radius + other.radius + margin
            if (pos[0] - other.position[0]) ** 2 + (pos[1] - other.position[1]) ** 2 < min_dist**2:
                ok = False
                break
        if ok:
            return float(pos[0]), float(pos[1])
    return None


def reset(
    params: SimParams,
    task: TaskSpec,
    n_distractor_objects: int,
    n_distractor_receptacles: int,
    seed: int,
) -> WorldState:
    """Sample a scene containing the task's targets plus distractors.

    Distractor classes are drawn without replacement from the classes that
    differ from the target, so every class appears at most once. Placement
    uses rejection sampling with a pairwise separation margin.
    """
    if task.target_object_class >= params.n_object_classes:
        raise SimError(f"object class {task.target_object_class} outside palette")
    if n_distractor_objects > params.n_object_classes - 1:
        raise SimError("more distractor objects than spare classes")
    if n_distractor_receptacles > params.n_receptacle_classes - 1:
        raise SimError("more distractor receptacles than spare classes")
    rng = np.random.default_rng(seed)

    receptacles: list[SceneEntity] = []
    rec_classes = []
    if task.kind == "pick_place":
        rec_classes.append(task.target_receptacle_class)
    spare_rec = [c for c in range(params.n_receptacle_classes) if c not in rec_classes]
    rec_classes.extend(rng.choice(spare_rec, size=n_distractor_receptacles, replace=False).tolist())

    obj_classes = [task.target_object_class]
    spare_obj = [c for c in range(params.n_object_classes) if c != task.target_object_class]
    obj_classes.extend(rng.choice(spare_obj, size=n_distractor_objects, replace=False).tolist())

    placed: list[SceneEntity] = []
    for c in rec_classes:
        pos = _sample_position(rng, params.receptacle_radius, placed, params.placement_margin)
        if pos is None:
            raise PlacementError(f"could not place receptacle class {c} for task {task.label}")
        entity = SceneEntity(int(c), pos, params.receptacle_radius)
        placed.append(entity)
        receptacles.append(entity)
    objects: list[SceneEntity] = []
    for c in obj_classes:
        pos = _sample_position(rng, params.object_radius, placed, params.placement_margin)
        if pos is None:
            raise PlacementError(f"could not place object class {c} for task {task.label}")
        entity = SceneEntity(int(c), pos, params.object_radius)
        placed.append(entity)
        objects.append(entity)
    return make_state(params, objects, receptacles)


def step(params: SimParams, state: WorldState, action: Action) -> WorldState:
    """Advance one tick. Pure: returns a new state."""
    new = state.copy()
    old_ap = state.gripper[3]
    new.gripper = np.clip(state.gripper + action.deltas, 0.0, 1.0)
    gx, gy, gz, ap = new.gripper

    if new.held_object is not None:
        idx = new.held_object
        obj = new.objects[idx]
        new.objects[idx] = replace(obj, position=(float(gx), float(gy)))
        if old_ap <= params.open_threshold < ap:
            for r, rec in enumerate(new.receptacles):
                dx = gx - rec.position[0]
                dy = gy - rec.position[1]
                if dx * dx + dy * dy < rec.radius**2:
                    new.released_inside[idx, r] = True
            new.held_object = None
    elif old_ap >= params.close_threshold > ap and gz < params.z_grasp:
        best, best_d2 = None, params.grasp_radius**2
        for i, obj in enumerate(new.objects):
            dx = gx - obj.position[0]
            dy = gy - obj.position[1]
            d2 = dx * dx + dy * dy
            if d2 < best_d2:
                best, best_d2 = i, d2
        if best is not None:
            new.held_object = best
            new.ever_held[best] = True
            new.objects[best] = replace(new.objects[best], position=(float(gx), float(gy)))

    if gz < params.z_contact:
        for i, obj in enumerate(new.objects):
            if i == new.held_object:
                continue
            dx = gx - obj.position[0]
            dy = gy - obj.position[1]
            if dx * dx + dy * dy < obj.radius**2:
                new.poked[i] = True

    new.step_count = state.step_count + 1
    return new


def _find_by_class(entities: list[SceneEntity], class_id: int) -> int | None:
    for i, e in enumerate(entities):
        if e.class_id == class_id:
            return i
    return None


def success(params: SimParams, state: WorldState, task: TaskSpec) -> float:
    """Score the state for the task: 0, 0.5 (pick only), or 1."""
    ti = _find_by_class(state.objects, task.target_object_class)
    if ti is None:
        return 0.0
    if task.kind == "poke":
        moved = np.linalg.norm(
            np.asarray(state.objects[ti].position) - state.initial_object_positions[ti]
        ) > params.poke_displacement
        return 1.0 if (moved or state.poked[ti]) else 0.0
    ri = _find_by_class(state.receptacles, task.target_receptacle_class)
    if ri is not None and state.released_inside[ti, ri]:
        return 1.0
    if state.ever_held[ti]:
        return 0.5
    return 0.0


# ---------------------------------------------------------------------------
# cameras
# ---------------------------------------------------------------------------


def project_to_pixel(world_xy, camera: CameraModel) -> tuple[float, float]:
    """Orthographic third-view map: u = x*G, v = (1-y)*G, continuous pixels."""
    if camera.view != "third":
        raise ValueError("project_to_pixel is defined for the third-view camera")
    x, y = float(world_xy[0]), float(world_xy[1])
    g = camera.resolution
    return x * g, (1.0 - y) * g


def render(params: SimParams, state: WorldState, camera: CameraModel) -> np.ndarray:
    """Rasterize the scene: receptacles, then objects, then the gripper marker."""
    res = camera.resolution
    if camera.view == "third":
        x0, y1 = 0.0, 1.0
    else:
        gx, gy = state.gripper[0], state.gripper[1]
        x0 = gx - camera.window / 2.0
        y1 = gy + camera.window / 2.0
    span = camera.window
    centers = (np.arange(res, dtype=np.float64) + 0.5) / res * span
    xs = x0 + centers  # column -> world x
    ys = y1 - centers  # row -> world y (top row is high y)
    xgrid, ygrid = np.meshgrid(xs, ys)

    img = np.empty((res, res, 3), dtype=np.float32)
    img[:] = BACKGROUND_COLOR

    def disk(cx: float, cy: float, radius: float, color: np.ndarray) -> None:
        mask = (xgrid - cx) ** 2 + (ygrid - cy) ** 2 <= radius * radius
        img[mask] = color

    for rec in state.receptacles:
        disk(rec.position[0], rec.position[1], rec.radius, RECEPTACLE_PALETTE[rec.class_id])
    for obj in state.objects:
        disk(obj.position[0], obj.position[1], obj.radius, OBJECT_PALETTE[obj.class_id])
    disk(state.gripper[0], state.gripper[1], params.marker_radius, MARKER_COLOR)
    return img


# ---------------------------------------------------------------------------
# scripted expert
# ---------------------------------------------------------------------------

_Z_TRAVEL = 0.45
_Z_GRASP_AT = 0.12
_Z_PLACE = 0.15
_Z_POKE = 0.06
_AP_OPEN = 0.9
_AP_CLOSED = 0.2
_POS_TOL = 0.012
_Z_TOL = 0.02


def _toward(current: np.ndarray, waypoint, params: SimParams, noise: float, rng) -> Action:
    delta = np.asarray(waypoint, dtype=np.float64) - current
    if noise > 0.0:
        if rng is None:
            raise ValueError("expert noise requires an rng")
        delta = delta + rng.normal(0.0, noise, size=4)
    return Action(delta, params.delta_max)


def expert_policy(
    params: SimParams,
    state: WorldState,
    task: TaskSpec,
    noise: float = 0.0,
    rng: np.random.Generator | None = None,
) -> Action:
    """One expert action for the current state.

    The script is memoryless: the phase is derived from the gripper pose,
    the held/contact flags, and the target positions, so it self-corrects
    under actuation noise.
    """
    ti = _find_by_class(state.objects, task.target_object_class)
    if ti is None:
        raise InfeasibleTaskError(f"no object of class {task.target_object_class} in scene")
    gx, gy, gz, ap = state.gripper
    obj = state.objects[ti]
    dxy = float(np.hypot(gx - obj.position[0], gy - obj.position[1]))

    if task.kind == "poke":
        if success(params, state, task) == 1.0:
            waypoint = (gx, gy, _Z_TRAVEL, _AP_OPEN)
        elif dxy <= _POS_TOL or (gz < params.z_grasp and dxy <= 0.8 * obj.radius):
            waypoint = (obj.position[0], obj.position[1], _Z_POKE, _AP_OPEN)
        else:
            waypoint = (obj.position[0], obj.position[1], _Z_TRAVEL, _AP_OPEN)
        return _toward(state.gripper, waypoint, params, noise, rng)

    ri = _find_by_class(state.receptacles, task.target_receptacle_class)
    if ri is None:
        raise InfeasibleTaskError(f"no receptacle of class {task.target_receptacle_class} in scene")
    rec = state.receptacles[ri]
    rxy = float(np.hypot(gx - rec.position[0], gy - rec.position[1]))

    if state.released_inside[ti, ri]:
        waypoint = (gx, gy, _Z_TRAVEL, _AP_OPEN)
    elif state.held_object == ti:
        if rxy > _POS_TOL:
            if gz < _Z_TRAVEL - _Z_TOL:
                waypoint = (gx, gy, _Z_TRAVEL, _AP_CLOSED)  # lift before transport
            else:
                waypoint = (rec.position[0], rec.position[1], _Z_TRAVEL, _AP_CLOSED)
        elif gz > _Z_PLACE + _Z_TOL:
            waypoint = (rec.position[0], rec.position[1], _Z_PLACE, _AP_CLOSED)
        else:
            waypoint = (rec.position[0], rec.position[1], _Z_PLACE, _AP_OPEN)  # open to release
    else:
        near_grasp = gz <= _Z_GRASP_AT + _Z_TOL and dxy <= 0.8 * params.grasp_radius
        if near_grasp:
            waypoint = (obj.position[0], obj.position[1], _Z_GRASP_AT, _AP_CLOSED)  # close to attach
        elif dxy <= _POS_TOL:
            waypoint = (obj.position[0], obj.position[1], _Z_GRASP_AT, _AP_OPEN)
        else:
            waypoint = (obj.position[0], obj.position[1], _Z_TRAVEL, _AP_OPEN)
    return _toward(state.gripper, waypoint, params, noise, rng)


def expert_rollout(
    params: SimParams,
    state: WorldState,
    task: TaskSpec,
    noise: float = 0.0,
    rng: np.random.Generator | None = None,
    max_steps: int = 400,
) -> tuple[list[WorldState], list[Action], float]:
    """Run the expert until the task succeeds or `max_steps` elapse.

    Returns (states, actions, final score) where states[i] is the state the
    expert saw when choosing actions[i]; the terminal state is not included.
    """
    states: list[WorldState] = []
    actions: list[Action] = []
    current = state
    for _ in range(max_steps):
        action = expert_policy(params, current, task, noise=noise, rng=rng)
        states.append(current)
        actions.append(action)
        current = step(params, current, action)
        if success(params, current, task) == 1.0:
            return states, actions, 1.0
    return states, actions, success(params, current, task)
