"""Declarative enclosure description and its realization into dipole lists.

A SceneTemplate captures the canonical deployment: four wall fences that
enclose the workspace, a distributed RIS array on the periphery (with a
sensing subset), a BS near one corner, a grid of candidate UE positions, and
scattering-object clusters that ride a closed trajectory.  realize() turns a
(template, RIS configuration, object state, UE site) tuple into the concrete
dipole list consumed by the wave simulator.

Scene files are line-oriented UTF-8 text (see parse_scene / write_scene);
writing then parsing is the identity on the canonical form.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import PlacementError, SceneFormatError, ValidationError
from .wavesim import DipoleProperties, FrequencyGrid, SceneInstance

# Dipole parameters for transceivers, scattering environment and RIS elements.
TRANSCEIVER_PROPS = DipoleProperties(f_res=1.0, chi=0.5, gamma_l=0.0)
ENVIRONMENT_PROPS = DipoleProperties(f_res=10.0, chi=50.0, gamma_l=1e4)
RIS_CHI = 0.2
RIS_GAMMA = 0.03
RIS_STATE_FRES = {0: 1.0, 1: 5.0}  # bit -> element resonance frequency

FENCE_SPACING = 0.25  # quarter-wavelength dipole spacing for fences
COLLISION_TOL = 1e-6  # objects closer than this (in wavelengths) are a placement error


@dataclass(frozen=True)
class RISConfig:
    """Binary state word; bit i sets the resonance frequency of RIS element i."""

    bits: tuple

    def __post_init__(self):
        object.__setattr__(self, "bits", tuple(int(b) for b in self.bits))
        if any(b not in (0, 1) for b in self.bits):
            raise ValidationError("RIS config bits must be 0 or 1")

    @property
    def n_ris(self):
        return len(self.bits)

    @classmethod
    def from_string(cls, s):
        return cls(tuple(int(c) for c in s))

    def to_string(self):
        return "".join(str(b) for b in self.bits)

    def f_res_values(self):
        return np.array([RIS_STATE_FRES[b] for b in self.bits])


@dataclass(frozen=True)
class SOState:
    """Path parameters of all scattering objects, each in [0, 1)."""

    t: tuple

    def __post_init__(self):
        object.__setattr__(self, "t", tuple(float(v) for v in self.t))
        if any(not (0.0 <= v < 1.0) for v in self.t):
            raise ValidationError("object path parameters must lie in [0, 1)")


@dataclass(frozen=True)
class SceneObject:
    """One scattering object: a rigid dipole cluster with shared properties."""

    props: DipoleProperties
    offsets: tuple  # ((dx, dy), ...) relative to the trajectory point


@dataclass
class SceneTemplate:
    grid: FrequencyGrid
    bs: tuple
    ue_rect: tuple  # (x0, y0, x1, y1, nx, ny)
    walls: tuple    # ((x0, y0, x1, y1), ...)
    ris_sites: tuple
    sense_idx: tuple
    objects: tuple
    trajectory: tuple

    def __post_init__(self):
        validate_template(self)

    @property
    def n_ris(self):
        return len(self.ris_sites)

    @property
    def s_ris(self):
        return len(self.sense_idx)

    @property
    def n_obj(self):
        return len(self.objects)

    @property
    def ue_sites(self):
        """Candidate UE positions, row-major over the grid (y outer, x inner)."""
        x0, y0, x1, y1, nx, ny = self.ue_rect
        xs = np.linspace(x0, x1, int(nx))
        ys = np.linspace(y0, y1, int(ny))
        return np.array([(x, y) for y in ys for x in xs])


def validate_template(tpl: SceneTemplate):
    if len(tpl.walls) == 0:
        raise ValidationError("template needs at least one [wall]")
    if len(tpl.ris_sites) == 0:
        raise ValidationError("template needs at least one [ris] element")
    if len(set(tpl.sense_idx)) != len(tpl.sense_idx):
        raise ValidationError("[sense] indices must be distinct")
    for i in tpl.sense_idx:
        if not 0 <= i < len(tpl.ris_sites):
            raise ValidationError(f"[sense] index {i} out of range (N_RIS={len(tpl.ris_sites)})")
    x0, y0, x1, y1, nx, ny = tpl.ue_rect
    if nx < 1 or ny < 1:
        raise ValidationError("[ue_grid] needs nx >= 1 and ny >= 1")
    if tpl.objects and len(tpl.trajectory) < 2:
        raise ValidationError("[trajectory] needs at least two vertices when objects exist")
    # walls must enclose every other entity (bounding-box check)
    wx = [w[i] for w in tpl.walls for i in (0, 2)]
    wy = [w[i] for w in tpl.walls for i in (1, 3)]
    lo = np.array([min(wx), min(wy)])
    hi = np.array([max(wx), max(wy)])
    pts = [np.asarray(tpl.bs)]
    pts.extend(tpl.ue_sites)
    pts.extend(np.asarray(s) for s in tpl.ris_sites)
    pts.extend(np.asarray(v) for v in tpl.trajectory)
    for p in pts:
        if np.any(p < lo - 1e-9) or np.any(p > hi + 1e-9):
            raise ValidationError(f"entity at {tuple(p)} lies outside the wall bounding box")


def build_fence(a, b, spacing, props: DipoleProperties):
    """Dipoles from a towards b every `spacing`, endpoint b always included."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    length = float(np.hypot(*(b - a)))
    if length == 0.0:
        raise ValidationError("fence endpoints coincide")
    if not spacing > 0:
        raise ValidationError(f"fence spacing must be positive, got {spacing}")
    n_steps = int(math.floor(length / spacing))
    direction = (b - a) / length
    pts = [a + direction * (spacing * i) for i in range(n_steps + 1)]
    if n_steps * spacing < length - 1e-12 * max(1.0, length):
        pts.append(b)
    return [(np.array(p), props) for p in pts]


def trajectory_point(tpl: SceneTemplate, t):
    """Point at arc-length fraction t (mod 1) along the closed trajectory."""
    verts = np.asarray(tpl.trajectory, dtype=np.float64)
    m = verts.shape[0]
    seg_vec = np.roll(verts, -1, axis=0) - verts
    seg_len = np.hypot(seg_vec[:, 0], seg_vec[:, 1])
    total = float(seg_len.sum())
    if total == 0.0:
        raise ValidationError("trajectory has zero length")
    s = (float(t) % 1.0) * total
    cum = 0.0
    for i in range(m):
        if s <= cum + seg_len[i] or i == m - 1:
            frac = (s - cum) / seg_len[i] if seg_len[i] > 0 else 0.0
            return verts[i] + frac * seg_vec[i]
        cum += seg_len[i]
    return verts[0]


def object_phase(j, n_obj):
    """Built-in per-object trajectory phase: golden-ratio steps around the loop.

    An irrational step keeps objects spread out and makes exact overlap
    impossible whenever path parameters are rational -- in particular at
    every quantization-cell center, for any bucket resolution.
    """
    return (j * (math.sqrt(5.0) - 1.0) / 2.0) % 1.0


def place_objects(tpl: SceneTemplate, p: SOState, static_positions):
    """Object dipole positions for state p, collision-checked.

    Each dipole is checked against static_positions and against the object
    dipoles placed before it; anything closer than COLLISION_TOL raises.
    Returns an (n_obj_dipoles, 2) array in object order.
    """
    if len(p.t) != tpl.n_obj:
        raise ValidationError(f"state length {len(p.t)} != template object count {tpl.n_obj}")
    static = np.asarray(static_positions, dtype=np.float64).reshape(-1, 2)
    placed = []
    for j, obj in enumerate(tpl.objects):
        anchor = trajectory_point(tpl, p.t[j] + object_phase(j, tpl.n_obj))
        for off in obj.offsets:
            pos = anchor + np.asarray(off, dtype=np.float64)
            d = np.hypot(static[:, 0] - pos[0], static[:, 1] - pos[1])
            if d.size and np.min(d) < COLLISION_TOL:
                raise PlacementError(f"object {j} dipole at {tuple(pos)} collides with the scene")
            if placed:
                prior = np.array(placed)
                d = np.hypot(prior[:, 0] - pos[0], prior[:, 1] - pos[1])
                if np.min(d) < COLLISION_TOL:
                    raise PlacementError(
                        f"object {j} dipole at {tuple(pos)} collides with another object"
                    )
            placed.append(pos)
    return np.array(placed).reshape(-1, 2)


def realize(tpl: SceneTemplate, k: RISConfig, p: SOState, ue_site):
    """Flatten the template into a SceneInstance.

    Dipole order: BS, UE, walls, RIS elements (template order), objects.
    ue_site indexes tpl.ue_sites; None omits the UE dipole, which is how
    sensing-only scenes are built.
    """
    if k.n_ris != tpl.n_ris:
        raise ValidationError(f"config length {k.n_ris} != template N_RIS {tpl.n_ris}")

    positions = [np.asarray(tpl.bs, dtype=np.float64)]
    props = [TRANSCEIVER_PROPS]
    roles = ["BS"]

    if ue_site is not None:
        sites = tpl.ue_sites
        if not 0 <= ue_site < len(sites):
            raise ValidationError(f"ue_site {ue_site} out of range (0..{len(sites) - 1})")
        positions.append(sites[ue_site])
        props.append(TRANSCEIVER_PROPS)
        roles.append("UE")

    for wall in tpl.walls:
        for pos, pr in build_fence(wall[:2], wall[2:], FENCE_SPACING, ENVIRONMENT_PROPS):
            positions.append(pos)
            props.append(pr)
            roles.append("WALL")

    sense = set(tpl.sense_idx)
    for i, site in enumerate(tpl.ris_sites):
        positions.append(np.asarray(site, dtype=np.float64))
        props.append(
            DipoleProperties(f_res=RIS_STATE_FRES[k.bits[i]], chi=RIS_CHI, gamma_l=RIS_GAMMA)
        )
        roles.append("SENSE" if i in sense else "RIS")

    obj_positions = place_objects(tpl, p, np.array(positions))
    obj_props = [obj.props for obj in tpl.objects for _ in obj.offsets]
    for pos, pr in zip(obj_positions, obj_props):
        positions.append(pos)
        props.append(pr)
        roles.append("OBJECT")

    return SceneInstance(positions=np.array(positions), props=tuple(props), roles=tuple(roles))


def sample_so_state(rng, tpl: SceneTemplate):
    """Independent uniform path parameters for every object."""
    if tpl.n_obj < 1:
        raise ValidationError("template has no objects to sample")
    return SOState(tuple(rng.random(tpl.n_obj)))


# ---------------------------------------------------------------------------
# scene file format

_SECTIONS = ("frequency", "bs", "ue_grid", "wall", "ris", "sense", "object", "trajectory")


def _fmt(x):
    return repr(float(x))


def write_scene(tpl: SceneTemplate):
    """Canonical text form; write -> parse -> write is byte identical."""
    g = tpl.grid
    lines = ["# rislab scene"]
    lines.append(f"[frequency] {_fmt(g.f_center)} {_fmt(g.half_band)} {g.n_points}")
    lines.append(f"[bs] {_fmt(tpl.bs[0])} {_fmt(tpl.bs[1])}")
    x0, y0, x1, y1, nx, ny = tpl.ue_rect
    lines.append(f"[ue_grid] {_fmt(x0)} {_fmt(y0)} {_fmt(x1)} {_fmt(y1)} {int(nx)} {int(ny)}")
    for w in tpl.walls:
        lines.append(f"[wall] {_fmt(w[0])} {_fmt(w[1])} {_fmt(w[2])} {_fmt(w[3])}")
    for s in tpl.ris_sites:
        lines.append(f"[ris] {_fmt(s[0])} {_fmt(s[1])}")
    lines.append("[sense] " + " ".join(str(i) for i in tpl.sense_idx))
    for obj in tpl.objects:
        pr = obj.props
        lines.append(f"[object] {_fmt(pr.f_res)} {_fmt(pr.chi)} {_fmt(pr.gamma_l)}")
        for off in obj.offsets:
            lines.append(f"offset {_fmt(off[0])} {_fmt(off[1])}")
    for v in tpl.trajectory:
        lines.append(f"[trajectory] {_fmt(v[0])} {_fmt(v[1])}")
    return "\n".join(lines) + "\n"


def _floats(tokens, n, line_no, what):
    if len(tokens) != n:
        raise SceneFormatError(line_no, f"{what} expects {n} fields, got {len(tokens)}")
    try:
        return [float(t) for t in tokens]
    except ValueError as exc:
        raise SceneFormatError(line_no, f"{what}: {exc}") from None


def parse_scene(text):
    """Parse the scene format; malformed lines raise with their line number."""
    freq = None
    bs = None
    ue_rect = None
    walls = []
    ris = []
    sense = None
    objects = []  # list of [props, offsets]
    traj = []
    current_object = None

    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tokens = line.split()
        head = tokens[0]
        if head.startswith("["):
            if not head.endswith("]"):
                raise SceneFormatError(line_no, f"malformed section tag {head!r}")
            name = head[1:-1]
            body = tokens[1:]
            if name not in _SECTIONS:
                raise SceneFormatError(line_no, f"unknown section [{name}]")
            if name != "object":
                current_object = None
            if name == "frequency":
                vals = _floats(body, 3, line_no, "[frequency]")
                if vals[2] != int(vals[2]):
                    raise SceneFormatError(line_no, "[frequency] n_points must be an integer")
                freq = FrequencyGrid(f_center=vals[0], half_band=vals[1], n_points=int(vals[2]))
            elif name == "bs":
                bs = tuple(_floats(body, 2, line_no, "[bs]"))
            elif name == "ue_grid":
                vals = _floats(body, 6, line_no, "[ue_grid]")
                ue_rect = (vals[0], vals[1], vals[2], vals[3], int(vals[4]), int(vals[5]))
            elif name == "wall":
                walls.append(tuple(_floats(body, 4, line_no, "[wall]")))
            elif name == "ris":
                ris.append(tuple(_floats(body, 2, line_no, "[ris]")))
            elif name == "sense":
                try:
                    sense = tuple(int(t) for t in body)
                except ValueError:
                    raise SceneFormatError(line_no, "[sense] expects integer indices") from None
            elif name == "object":
                vals = _floats(body, 3, line_no, "[object]")
                current_object = [DipoleProperties(*vals), []]
                objects.append(current_object)
            elif name == "trajectory":
                traj.append(tuple(_floats(body, 2, line_no, "[trajectory]")))
        elif head == "offset":
            if current_object is None:
                raise SceneFormatError(line_no, "offset line outside an [object] section")
            current_object[1].append(tuple(_floats(tokens[1:], 2, line_no, "offset")))
        else:
            raise SceneFormatError(line_no, f"unrecognized line {raw.strip()!r}")

    for name, value in (("frequency", freq), ("bs", bs), ("ue_grid", ue_rect),
                        ("ris", ris or None), ("sense", sense)):
        if value is None:
            raise ValidationError(f"scene file is missing the [{name}] section")
    for obj in objects:
        if not obj[1]:
            raise ValidationError("an [object] section has no offset lines")

    return SceneTemplate(
        grid=freq,
        bs=bs,
        ue_rect=ue_rect,
        walls=tuple(walls),
        ris_sites=tuple(ris),
        sense_idx=sense,
        objects=tuple(SceneObject(props=o[0], offsets=tuple(o[1])) for o in objects),
        trajectory=tuple(traj),
    )


# ---------------------------------------------------------------------------
# default enclosure

DEFAULT_OBJECT_PROPS = DipoleProperties(f_res=1.0, chi=0.3, gamma_l=0.1)


def default_template(n_ris=16, n_sense=8, n_points=64, half_band=0.1, size=15.0):
    """15-wavelength square enclosure with wall-mounted RIS groups.

    Walls cover the central 80% of each side; the RIS is split into four
    groups inset a quarter wavelength from the walls; 2x2 object clusters ride
    a rectangular loop between the walls and the interior UE grid.
    """
    if n_sense > n_ris:
        raise ValidationError(f"n_sense={n_sense} exceeds n_ris={n_ris}")
    s = float(size)
    lo, hi = 0.1 * s, 0.9 * s
    walls = (
        (lo, 0.0, hi, 0.0),
        (s, lo, s, hi),
        (lo, s, hi, s),
        (0.0, lo, 0.0, hi),
    )
    # RIS groups: bottom, right, top, left; contiguous runs centered per wall
    counts = [n_ris // 4] * 4
    for i in range(n_ris % 4):
        counts[i] += 1
    inset = 0.25
    spacing = 0.5
    ris = []
    for w, count in enumerate(counts):
        if count == 0:
            continue
        start = s / 2 - (count - 1) * spacing / 2
        for i in range(count):
            along = start + i * spacing
            if w == 0:
                ris.append((along, inset))
            elif w == 1:
                ris.append((s - inset, along))
            elif w == 2:
                ris.append((along, s - inset))
            else:
                ris.append((inset, along))
    sense_idx = tuple(round(i * n_ris / n_sense) for i in range(n_sense))
    offsets = ((0.0, 0.0), (0.25, 0.0), (0.0, 0.25), (0.25, 0.25))
    objects = tuple(SceneObject(props=DEFAULT_OBJECT_PROPS, offsets=offsets) for _ in range(4))
    a, b = 0.2 * s, 0.8 * s
    trajectory = ((a, a), (b, a), (b, b), (a, b))
    u0, u1 = 0.3 * s, 0.7 * s
    return SceneTemplate(
        grid=FrequencyGrid(f_center=1.0, half_band=half_band, n_points=n_points),
        bs=(0.08 * s, 0.08 * s),
        ue_rect=(u0, u0, u1, u1, 5, 5),
        walls=walls,
        ris_sites=tuple(ris),
        sense_idx=sense_idx,
        objects=objects,
        trajectory=trajectory,
    )
