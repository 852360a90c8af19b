"""Vehicle kinematics on a rectangular tile with straight lanes that wrap in x."""

from __future__ import annotations

import enum
import math
import random
from dataclasses import dataclass, field, replace

from .kernel import Kernel, seconds


class Command(enum.Enum):
    ACCELERATE = "accelerate"
    DECELERATE = "decelerate"
    HOLD = "hold"


class TooDense(ValueError):
    pass


@dataclass(frozen=True)
class KinematicsConfig:
    max_speed: float = 17.0
    accel: float = 2.6
    decel: float = 4.5
    tile_x: float = 300.0
    tile_y: float = 100.0
    # lanes run along x; odd lanes drive towards -x
    lane_y: tuple[float, ...] = (45.0, 55.0)
    min_spacing: float = 5.0
    update_interval: float = 0.1
    # targets redrawn with this probability per update
    retarget_prob: float = 0.01

    def __post_init__(self):
        if self.max_speed <= 0 or self.accel <= 0 or self.decel <= 0:
            raise ValueError("max_speed, accel and decel must be positive")
        if not self.lane_y:
            raise ValueError("at least one lane is required")
        for y in self.lane_y:
            if not 0 <= y <= self.tile_y:
                raise ValueError(f"lane y={y} outside tile")


@dataclass(frozen=True)
class VehicleState:
    node_id: int
    x: float
    y: float
    speed: float = 0.0
    command: Command = Command.HOLD
    heading: int = 1  # +1 or -1 along the x axis

    @property
    def position(self) -> tuple[float, float]:
        return (self.x, self.y)


def step(state: VehicleState, dt: float, cfg: KinematicsConfig = KinematicsConfig()) -> VehicleState:
    """Advance one vehicle by ``dt`` seconds: update speed, then move and wrap in x."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    speed = state.speed
    if state.command is Command.ACCELERATE:
        speed += cfg.accel * dt
    elif state.command is Command.DECELERATE:
        speed -= cfg.decel * dt
    speed = min(max(speed, 0.0), cfg.max_speed)
    x = (state.x + state.heading * speed * dt) % cfg.tile_x
    return replace(state, x=x, speed=speed)


def spawn_fleet(n: int, cfg: KinematicsConfig = KinematicsConfig(), seed: int = 0) -> list[VehicleState]:
    """Place ``n`` stationary vehicles at distinct lane slots.

    Node 0 is the gateway-attached vehicle and always takes the first slot of lane 0.
    """
    if n < 1:
        raise ValueError("need at least one vehicle")
    per_lane = int(cfg.tile_x // cfg.min_spacing)
    capacity = per_lane * len(cfg.lane_y)
    if n > capacity:
        raise TooDense(f"{n} vehicles exceed {capacity} slots at {cfg.min_spacing} m spacing")
    rng = random.Random(seed)
    slots = [0] + rng.sample(range(1, capacity), n - 1)
    fleet = []
    for node_id, slot in enumerate(slots):
        lane, idx = divmod(slot, per_lane)
        fleet.append(VehicleState(
            node_id=node_id,
            x=idx * cfg.min_spacing,
            y=cfg.lane_y[lane],
            heading=1 if lane % 2 == 0 else -1,
        ))
    return fleet


@dataclass
class MobilityProcess:
    """Steps a fleet every ``cfg.update_interval`` on the kernel.

    Each vehicle chases a random target speed, accelerating or braking towards it.
    """

    kernel: Kernel
    fleet: list[VehicleState]
    cfg: KinematicsConfig
    rng: random.Random
    on_update: object = None  # callable(list[VehicleState]) or None
    targets: list[float] = field(default_factory=list)

    def start(self) -> None:
        self.targets = [self._draw_target() for _ in self.fleet]
        self.kernel.schedule_in(seconds(self.cfg.update_interval), self._tick, "mobility")

    def _draw_target(self) -> float:
        return self.rng.uniform(0.5 * self.cfg.max_speed, self.cfg.max_speed)

    def _tick(self, _payload=None) -> None:
        dt = self.cfg.update_interval
        new = []
        for i, v in enumerate(self.fleet):
            if self.rng.random() < self.cfg.retarget_prob:
                self.targets[i] = self._draw_target()
            target = self.targets[i]
            if v.speed < target - self.cfg.accel * dt:
                cmd = Command.ACCELERATE
            elif v.speed > target + self.cfg.decel * dt:
                cmd = Command.DECELERATE
            else:
                cmd = Command.HOLD
            new.append(step(replace(v, command=cmd), dt, self.cfg))
        self.fleet[:] = new
        if self.on_update is not None:
            self.on_update(new)
        self.kernel.schedule_in(seconds(dt), self._tick, "mobility")


def distance(a: tuple[float, float], b: tuple[float, float]) -> float:
    return math.hypot(a[0] - b[0], a[1] - b[1])
