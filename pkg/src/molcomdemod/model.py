"""Voxelized reaction-diffusion continuous-time Markov model.

The transmission medium is a 3-D lattice of cubic voxels of width ``W``.  The
signalling species ``S`` hops between face-adjacent voxels at rate
``d = D / W**2``; a transmitter occupies one voxel and runs a symbol-dependent
set of chemical reactions; a receiver voxel holds ``M`` receptors that bind
free signalling molecules at per-pair propensity ``lam = lam_tilde / W**3``
and unbind at rate ``mu``.

The state is the pair ``(n, b)`` where ``n`` stacks the per-voxel signalling
counts, the transmitter-confined intermediate species counts and the
cumulative absorbed count, and ``b`` is the number of bound receptors.
:func:`build_model` flattens a specification into an immutable list of
transition channels with propensity functions, ready for exact simulation.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace
from typing import Iterable, Mapping, Sequence

import numpy as np
import yaml

from .errors import ConfigError

SIGNAL_SPECIES = "S"

FACES = ("x-", "x+", "y-", "y+", "z-", "z+")

# kinetics order codes shared with the SSA core
KIND_ZEROTH = 0
KIND_FIRST = 1
KIND_SECOND = 2
KIND_BINDING = 3
KIND_UNBINDING = 4

MODEL_FILE_VERSION = 1

# voxel widths (um) outside this range get a configuration warning
_W_VALID_RANGE = (0.01, 10.0)


@dataclass(frozen=True)
class Boundary:
    """Boundary condition of one exterior face."""

    kind: str  # "reflecting" | "absorbing"
    escape_rate: float = 0.0

    def __post_init__(self):
        if self.kind not in ("reflecting", "absorbing"):
            raise ConfigError(f"unknown boundary kind {self.kind!r}")
        if self.kind == "absorbing" and self.escape_rate < 0:
            raise ConfigError("escape rate must be nonnegative")
        if self.kind == "reflecting" and self.escape_rate != 0.0:
            raise ConfigError("reflecting boundary cannot carry an escape rate")


REFLECTING = Boundary("reflecting")


@dataclass(frozen=True, eq=True)
class GridSpec:
    """Voxel lattice geometry, diffusion constant and boundary conditions.

    ``boundary`` maps each exterior face tag (``x-`` .. ``z+``) to a
    :class:`Boundary`; every boundary voxel contributes one escape channel per
    absorbing exterior face it touches.
    """

    nx: int
    ny: int
    nz: int
    voxel_width: float
    diffusion: float
    boundary: tuple[tuple[str, Boundary], ...] = tuple(
        (f, REFLECTING) for f in FACES
    )

    def __post_init__(self):
        for name, v in (("nx", self.nx), ("ny", self.ny), ("nz", self.nz)):
            if not isinstance(v, (int, np.integer)) or v < 1:
                raise ConfigError(f"{name} must be a positive integer, got {v!r}")
        if self.voxel_width <= 0:
            raise ConfigError("voxel_width must be positive")
        if self.diffusion < 0:
            raise ConfigError("diffusion coefficient must be nonnegative")
        faces = [f for f, _ in self.boundary]
        if sorted(faces) != sorted(FACES):
            raise ConfigError(f"boundary must cover exactly the faces {FACES}")
        if not (_W_VALID_RANGE[0] <= self.voxel_width <= _W_VALID_RANGE[1]):
            warnings.warn(
                f"voxel width {self.voxel_width} um is outside the usual "
                f"validity range {_W_VALID_RANGE}",
                stacklevel=2,
            )

    @property
    def n_voxels(self) -> int:
        return self.nx * self.ny * self.nz

    @property
    def hop_rate(self) -> float:
        """Inter-voxel hop rate d = D / W**2."""
        return self.diffusion / self.voxel_width**2

    @property
    def boundary_map(self) -> dict[str, Boundary]:
        return dict(self.boundary)

    @classmethod
    def reflecting(cls, nx, ny, nz, voxel_width, diffusion) -> "GridSpec":
        return cls(nx, ny, nz, voxel_width, diffusion)

    @classmethod
    def absorbing(cls, nx, ny, nz, voxel_width, diffusion, escape_rate,
                  faces: Sequence[str] = FACES) -> "GridSpec":
        """Grid with absorbing boundary at ``escape_rate`` on ``faces``."""
        bnd = tuple(
            (f, Boundary("absorbing", escape_rate) if f in faces else REFLECTING)
            for f in FACES
        )
        return cls(nx, ny, nz, voxel_width, diffusion, bnd)


def voxel_index(x: int, y: int, z: int, grid: GridSpec) -> int:
    """Single voxel index of the triple ``(x, y, z)`` (all 1-based).

    ``xi(x, y, z) = x + nx * (y - 1) + nx * ny * (z - 1)``; a bijection from
    the grid onto ``1 .. n_voxels``.
    """
    if not (1 <= x <= grid.nx and 1 <= y <= grid.ny and 1 <= z <= grid.nz):
        raise IndexError(
            f"voxel ({x},{y},{z}) outside grid {grid.nx}x{grid.ny}x{grid.nz}"
        )
    return x + grid.nx * (y - 1) + grid.nx * grid.ny * (z - 1)


def voxel_coords(xi: int, grid: GridSpec) -> tuple[int, int, int]:
    """Inverse of :func:`voxel_index`."""
    if not (1 <= xi <= grid.n_voxels):
        raise IndexError(f"voxel index {xi} outside 1..{grid.n_voxels}")
    xi0 = xi - 1
    x = xi0 % grid.nx
    y = (xi0 // grid.nx) % grid.ny
    z = xi0 // (grid.nx * grid.ny)
    return x + 1, y + 1, z + 1


def _neighbors(xi: int, grid: GridSpec) -> list[int]:
    x, y, z = voxel_coords(xi, grid)
    out = []
    for dx, dy, dz in ((1, 0, 0), (-1, 0, 0), (0, 1, 0),
                       (0, -1, 0), (0, 0, 1), (0, 0, -1)):
        nxyz = (x + dx, y + dy, z + dz)
        if 1 <= nxyz[0] <= grid.nx and 1 <= nxyz[1] <= grid.ny and 1 <= nxyz[2] <= grid.nz:
            out.append(voxel_index(*nxyz, grid))
    return out


def _exterior_faces(xi: int, grid: GridSpec) -> list[str]:
    x, y, z = voxel_coords(xi, grid)
    faces = []
    if x == 1:
        faces.append("x-")
    if x == grid.nx:
        faces.append("x+")
    if y == 1:
        faces.append("y-")
    if y == grid.ny:
        faces.append("y+")
    if z == 1:
        faces.append("z-")
    if z == grid.nz:
        faces.append("z+")
    return faces


@dataclass(frozen=True)
class Reaction:
    """One localized chemical reaction.

    Reactants and products are species names, repeated for stoichiometry;
    the kinetics order is the number of reactants (at most two, and a
    second-order reaction must have two distinct species).  Propensities are
    in molecule counts, not concentrations: zeroth order is the bare rate
    constant, first order multiplies by the reactant count, second order by
    the product of the two reactant counts.
    """

    reactants: tuple[str, ...]
    products: tuple[str, ...]
    rate: float

    def __post_init__(self):
        object.__setattr__(self, "reactants", tuple(self.reactants))
        object.__setattr__(self, "products", tuple(self.products))
        if self.rate < 0:
            raise ConfigError("reaction rate must be nonnegative")
        if len(self.reactants) > 2:
            raise ConfigError("kinetics orders above 2 are not supported")
        if len(self.reactants) == 2 and self.reactants[0] == self.reactants[1]:
            raise ConfigError(
                "second-order reactions must have two distinct reactants"
            )

    @property
    def order(self) -> int:
        return len(self.reactants)


ReactionSet = tuple  # alias: a symbol's reaction set is a tuple of Reaction


@dataclass(frozen=True)
class BernoulliInitial:
    """Randomized initial condition: with probability ``prob`` apply
    ``counts_if`` to the initial state, otherwise ``counts_else``."""

    prob: float
    counts_if: tuple[tuple[str, int], ...]
    counts_else: tuple[tuple[str, int], ...] = ()

    def __post_init__(self):
        if not 0.0 <= self.prob <= 1.0:
            raise ConfigError("probability must be in [0, 1]")


@dataclass(frozen=True)
class TransmitterSpec:
    """Transmitter voxel, per-symbol reaction sets and intermediate species."""

    voxel: int
    symbols: tuple[tuple[Reaction, ...], ...]
    intermediates: tuple[str, ...] = ()
    initial_counts: tuple[tuple[str, int], ...] = ()
    random_initial: tuple[BernoulliInitial, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "symbols",
                           tuple(tuple(rs) for rs in self.symbols))
        object.__setattr__(self, "intermediates", tuple(self.intermediates))
        object.__setattr__(self, "initial_counts",
                           tuple(tuple(kv) for kv in self.initial_counts))
        if len(self.symbols) < 2:
            raise ConfigError("a transmitter needs at least 2 symbols")
        names = set(self.intermediates)
        if len(names) != len(self.intermediates):
            raise ConfigError("duplicate intermediate species")
        if SIGNAL_SPECIES in names:
            raise ConfigError(f"{SIGNAL_SPECIES!r} is the reserved signalling species")
        allowed = names | {SIGNAL_SPECIES}
        for rs in self.symbols:
            for rxn in rs:
                for sp in (*rxn.reactants, *rxn.products):
                    if sp not in allowed:
                        raise ConfigError(f"reaction references undeclared species {sp!r}")
        for sp, c in self.initial_counts:
            if sp not in names:
                raise ConfigError(f"initial count for undeclared species {sp!r}")
            if c < 0:
                raise ConfigError("initial counts must be nonnegative")
        for rnd in self.random_initial:
            for sp, _ in (*rnd.counts_if, *rnd.counts_else):
                if sp not in names:
                    raise ConfigError(f"random initial for undeclared species {sp!r}")

    @property
    def n_symbols(self) -> int:
        return len(self.symbols)


@dataclass(frozen=True)
class ReceiverSpec:
    """Receiver voxel with ``receptor_count`` identical receptors.

    ``binding_rate`` is the volumetric rate constant lam_tilde (um^3/s); the
    per-pair binding propensity constant is ``lam = lam_tilde / W**3`` and may
    be pinned explicitly through ``binding_propensity`` (validated against the
    grid at model build time).  ``unbinding_rate`` is mu (1/s).
    """

    voxel: int
    receptor_count: int
    binding_rate: float
    unbinding_rate: float
    binding_propensity: float | None = None

    def __post_init__(self):
        if self.receptor_count < 1:
            raise ConfigError("receptor count must be at least 1")
        if self.binding_rate < 0 or self.unbinding_rate < 0:
            raise ConfigError("receptor rate constants must be nonnegative")

    def propensity_constant(self, voxel_width: float) -> float:
        """lam = lam_tilde / W**3, validated against any pinned value."""
        lam = self.binding_rate / voxel_width**3
        if self.binding_propensity is not None:
            if not np.isclose(self.binding_propensity, lam, rtol=1e-12, atol=0.0):
                raise ConfigError(
                    f"binding_propensity {self.binding_propensity} != "
                    f"binding_rate / W^3 = {lam}"
                )
            return self.binding_propensity
        return lam


@dataclass
class SystemState:
    """Mutable system state: count vector ``n`` and bound-receptor count ``b``.

    ``n`` stacks per-voxel signalling counts, intermediate counts and the
    cumulative absorbed count, in the coordinate order of the owning model.
    """

    n: np.ndarray
    b: int = 0

    def copy(self) -> "SystemState":
        return SystemState(self.n.copy(), self.b)


@dataclass(frozen=True, eq=False)
class Channel:
    """One transition channel: a state delta plus a propensity rule.

    ``code`` selects the propensity form: zeroth (``rate``), first
    (``rate * n[idx1]``), second (``rate * n[idx1] * n[idx2]``), binding
    (``rate * n[idx1] * (M - b)``) or unbinding (``rate * b``).
    """

    kind: str
    label: str
    code: int
    rate: float
    delta: np.ndarray
    db: int = 0
    idx1: int = -1
    idx2: int = -1

    def propensity(self, state: SystemState, receptor_count: int = 0) -> float:
        if self.code == KIND_ZEROTH:
            return self.rate
        if self.code == KIND_FIRST:
            return self.rate * state.n[self.idx1]
        if self.code == KIND_SECOND:
            return self.rate * state.n[self.idx1] * state.n[self.idx2]
        if self.code == KIND_BINDING:
            return self.rate * state.n[self.idx1] * (receptor_count - state.b)
        if self.code == KIND_UNBINDING:
            return self.rate * state.b
        raise ConfigError(f"unknown channel code {self.code}")


@dataclass(eq=False)
class Model:
    """Immutable compiled model: coordinate layout, channels, initial state."""

    grid: GridSpec
    transmitter: TransmitterSpec | None
    receiver: ReceiverSpec | None
    symbol: int
    coord_names: tuple[str, ...]
    channels: tuple[Channel, ...]
    initial_counts: np.ndarray
    random_initial: tuple[tuple[float, np.ndarray, np.ndarray], ...]
    receptor_count: int
    lam: float
    mu: float
    receiver_coord: int  # 0-based coordinate of the receiver voxel, -1 if none

    # channel arrays for the simulation core, built lazily
    _arrays: tuple | None = field(default=None, repr=False)

    @property
    def n_coords(self) -> int:
        return len(self.coord_names)

    @property
    def n_voxels(self) -> int:
        return self.grid.n_voxels

    def coord_of(self, name: str) -> int:
        return self.coord_names.index(name)

    def initial_state(self, seed: int | None = None) -> SystemState:
        """Initial state; ``seed`` resolves any randomized initial counts."""
        from .rng import derive_seed, uniform01, DOMAIN_INIT

        n = self.initial_counts.copy()
        for i, (prob, add_if, add_else) in enumerate(self.random_initial):
            if prob > 0 and seed is None:
                raise ConfigError("model has randomized initial counts; a seed is required")
            u = uniform01(derive_seed(seed, DOMAIN_INIT, i)) if seed is not None else 1.0
            n += add_if if u < prob else add_else
        return SystemState(n, 0)

    def total_propensity(self, state: SystemState) -> float:
        """Sum of all channel propensities at ``state`` (zero iff absorbing)."""
        return float(sum(ch.propensity(state, self.receptor_count)
                         for ch in self.channels))

    def apply_channel(self, state: SystemState, channel: Channel) -> SystemState:
        """State after firing ``channel`` (the caller checks propensity > 0)."""
        out = SystemState(state.n + channel.delta, state.b + channel.db)
        if out.n.min() < 0 or not (0 <= out.b <= max(self.receptor_count, 0)):
            raise ConfigError(f"channel {channel.label} fired from an invalid state")
        return out

    def channel_arrays(self):
        """Flat (kinds, rates, i1, i2, deltas, dbs) arrays for the SSA core."""
        if self._arrays is None:
            chans = self.channels
            kinds = np.array([c.code for c in chans], dtype=np.int64)
            rates = np.array([c.rate for c in chans], dtype=np.float64)
            i1 = np.array([c.idx1 for c in chans], dtype=np.int64)
            i2 = np.array([c.idx2 for c in chans], dtype=np.int64)
            if chans:
                deltas = np.stack([c.delta for c in chans]).astype(np.int64)
            else:
                deltas = np.zeros((0, self.n_coords), dtype=np.int64)
            dbs = np.array([c.db for c in chans], dtype=np.int64)
            object.__setattr__(self, "_arrays", (kinds, rates, i1, i2, deltas, dbs))
        return self._arrays


def _reaction_channel(rxn: Reaction, j: int, coord: Mapping[str, int],
                      absorbed_coord: int, n_coords: int) -> Channel:
    delta = np.zeros(n_coords, dtype=np.int64)
    for sp in rxn.reactants:
        delta[coord[sp]] -= 1
    for sp in rxn.products:
        delta[coord[sp]] += 1
    removed = len(rxn.reactants) - len(rxn.products)
    if removed > 0:
        # consumed molecules not reappearing leave the system for good
        delta[absorbed_coord] += removed
    code = (KIND_ZEROTH, KIND_FIRST, KIND_SECOND)[rxn.order]
    idx1 = coord[rxn.reactants[0]] if rxn.order >= 1 else -1
    idx2 = coord[rxn.reactants[1]] if rxn.order == 2 else -1
    return Channel(kind="reaction", label=f"tx[{j}]", code=code, rate=rxn.rate,
                   delta=delta, idx1=idx1, idx2=idx2)


def build_model(grid: GridSpec, tx: TransmitterSpec | None,
                rx: ReceiverSpec | None, symbol: int = 0) -> Model:
    """Compile the full channel list for one transmission symbol.

    The channel list holds one diffusion channel per ordered pair of
    neighbouring voxels, one escape channel per absorbing exterior face of
    each boundary voxel, one channel per transmitter reaction of the chosen
    symbol, and (when a receiver is present) one binding and one unbinding
    channel.  All counts start at zero except the configured intermediate
    initial counts.
    """
    if tx is not None and not (1 <= tx.voxel <= grid.n_voxels):
        raise ConfigError(f"transmitter voxel {tx.voxel} outside the grid")
    if rx is not None and not (1 <= rx.voxel <= grid.n_voxels):
        raise ConfigError(f"receiver voxel {rx.voxel} outside the grid")
    if tx is not None and rx is not None and tx.voxel == rx.voxel:
        raise ConfigError("transmitter and receiver must occupy distinct voxels")
    if tx is not None and symbol >= tx.n_symbols:
        raise ConfigError(f"symbol {symbol} out of range (K={tx.n_symbols})")

    nv = grid.n_voxels
    intermediates = tx.intermediates if tx is not None else ()
    coord_names = tuple(f"v{i}" for i in range(1, nv + 1)) + intermediates + ("A",)
    coord = {name: i for i, name in enumerate(coord_names)}
    absorbed = coord["A"]
    n_coords = len(coord_names)
    d = grid.hop_rate
    boundary = grid.boundary_map

    channels: list[Channel] = []
    # diffusion: only the signalling species hops, one channel per ordered pair
    for xi in range(1, nv + 1):
        for xj in _neighbors(xi, grid):
            delta = np.zeros(n_coords, dtype=np.int64)
            delta[xi - 1] -= 1
            delta[xj - 1] += 1
            channels.append(Channel(kind="diffusion", label=f"D {xi}->{xj}",
                                    code=KIND_FIRST, rate=d, delta=delta,
                                    idx1=xi - 1))
    # escape through absorbing exterior faces
    for xi in range(1, nv + 1):
        for face in _exterior_faces(xi, grid):
            bnd = boundary[face]
            if bnd.kind != "absorbing":
                continue
            delta = np.zeros(n_coords, dtype=np.int64)
            delta[xi - 1] -= 1
            delta[absorbed] += 1
            channels.append(Channel(kind="escape", label=f"esc {xi} {face}",
                                    code=KIND_FIRST, rate=bnd.escape_rate,
                                    delta=delta, idx1=xi - 1))
    # transmitter reactions for the chosen symbol, localized to the tx voxel
    if tx is not None:
        local = dict(coord)
        local[SIGNAL_SPECIES] = tx.voxel - 1
        for j, rxn in enumerate(tx.symbols[symbol]):
            channels.append(_reaction_channel(rxn, j, local, absorbed, n_coords))
    # receiver
    lam = mu = 0.0
    receptor_count = 0
    receiver_coord = -1
    if rx is not None:
        lam = rx.propensity_constant(grid.voxel_width)
        mu = rx.unbinding_rate
        receptor_count = rx.receptor_count
        receiver_coord = rx.voxel - 1
        delta = np.zeros(n_coords, dtype=np.int64)
        delta[receiver_coord] -= 1
        channels.append(Channel(kind="binding", label="bind", code=KIND_BINDING,
                                rate=lam, delta=delta, db=+1, idx1=receiver_coord))
        delta = np.zeros(n_coords, dtype=np.int64)
        delta[receiver_coord] += 1
        channels.append(Channel(kind="unbinding", label="unbind",
                                code=KIND_UNBINDING, rate=mu, delta=delta, db=-1))

    initial = np.zeros(n_coords, dtype=np.int64)
    rand: list[tuple[float, np.ndarray, np.ndarray]] = []
    if tx is not None:
        for sp, c in tx.initial_counts:
            initial[coord[sp]] = c
        for rnd in tx.random_initial:
            add_if = np.zeros(n_coords, dtype=np.int64)
            add_else = np.zeros(n_coords, dtype=np.int64)
            for sp, c in rnd.counts_if:
                add_if[coord[sp]] += c
            for sp, c in rnd.counts_else:
                add_else[coord[sp]] += c
            rand.append((rnd.prob, add_if, add_else))

    return Model(grid=grid, transmitter=tx, receiver=rx, symbol=symbol,
                 coord_names=coord_names, channels=tuple(channels),
                 initial_counts=initial, random_initial=tuple(rand),
                 receptor_count=receptor_count, lam=lam, mu=mu,
                 receiver_coord=receiver_coord)


def total_propensity(model: Model, state: SystemState) -> float:
    """Module-level alias of :meth:`Model.total_propensity`."""
    return model.total_propensity(state)


# ---------------------------------------------------------------------------
# built-in three-voxel example (the canonical small end-to-end system)
# ---------------------------------------------------------------------------

def three_voxel_example(k1=1.0, k2=1.0, k3=1.0, k4=1.0,
                        receptors=2, binding_rate=0.005,
                        unbinding_rate=1.0, voxel_width=1.0 / 3.0,
                        diffusion=1.0) -> "ModelSpec":
    """Three-voxel chain with a four-reaction transmitter.

    Intermediate species F and G are produced by constitutive sources, F
    converts into the signalling species, and S + G annihilate; the receiver
    sits in the last voxel.  Useful as a small but fully featured test model.
    """
    tx = TransmitterSpec(
        voxel=1,
        symbols=(
            (
                Reaction((), ("F",), k1),
                Reaction((), ("G",), k2),
                Reaction(("F",), (SIGNAL_SPECIES,), k3),
                Reaction((SIGNAL_SPECIES, "G"), (), k4),
            ),
        ) * 2,
        intermediates=("F", "G"),
    )
    rx = ReceiverSpec(voxel=3, receptor_count=receptors,
                      binding_rate=binding_rate, unbinding_rate=unbinding_rate)
    grid = GridSpec.reflecting(3, 1, 1, voxel_width, diffusion)
    return ModelSpec(grid=grid, transmitter=tx, receiver=rx)


# ---------------------------------------------------------------------------
# model specification files
# ---------------------------------------------------------------------------

@dataclass
class ModelSpec:
    """Full model definition: grid + transmitter + optional receiver.

    Round-trips losslessly through the YAML model file format (see
    :func:`load_model_file`).
    """

    grid: GridSpec
    transmitter: TransmitterSpec | None = None
    receiver: ReceiverSpec | None = None

    def build(self, symbol: int = 0) -> Model:
        return build_model(self.grid, self.transmitter, self.receiver, symbol)

    @property
    def n_symbols(self) -> int:
        return self.transmitter.n_symbols if self.transmitter else 0

    def to_dict(self) -> dict:
        g = self.grid
        bnd = {}
        for f, b in g.boundary:
            bnd[f] = b.kind if b.kind == "reflecting" else {"absorbing": b.escape_rate}
        doc: dict = {
            "version": MODEL_FILE_VERSION,
            "grid": {"nx": g.nx, "ny": g.ny, "nz": g.nz,
                     "voxel_width": g.voxel_width, "diffusion": g.diffusion,
                     "boundary": bnd},
        }
        if self.transmitter is not None:
            tx = self.transmitter
            doc["transmitter"] = {
                "voxel": tx.voxel,
                "intermediates": list(tx.intermediates),
                "initial_counts": {sp: c for sp, c in tx.initial_counts},
                "random_initial": [
                    {"prob": r.prob,
                     "counts_if": {sp: c for sp, c in r.counts_if},
                     "counts_else": {sp: c for sp, c in r.counts_else}}
                    for r in tx.random_initial
                ],
                "symbols": [
                    [{"reactants": list(r.reactants), "products": list(r.products),
                      "rate": r.rate} for r in rs]
                    for rs in tx.symbols
                ],
            }
        if self.receiver is not None:
            rx = self.receiver
            doc["receiver"] = {
                "voxel": rx.voxel, "receptors": rx.receptor_count,
                "binding_rate": rx.binding_rate,
                "unbinding_rate": rx.unbinding_rate,
            }
            if rx.binding_propensity is not None:
                doc["receiver"]["binding_propensity"] = rx.binding_propensity
        return doc

    @classmethod
    def from_dict(cls, doc: Mapping) -> "ModelSpec":
        try:
            version = doc.get("version", MODEL_FILE_VERSION)
            if version != MODEL_FILE_VERSION:
                raise ConfigError(f"unsupported model file version {version}")
            g = doc["grid"]
            bnd_doc = g.get("boundary", "reflecting")
            if isinstance(bnd_doc, str):
                bnd_doc = {f: bnd_doc for f in FACES}
            elif "default" in bnd_doc:
                default = bnd_doc["default"]
                bnd_doc = {f: bnd_doc.get(f, default) for f in FACES}
            boundary = []
            for f in FACES:
                b = bnd_doc[f]
                if b == "reflecting":
                    boundary.append((f, REFLECTING))
                elif isinstance(b, Mapping) and "absorbing" in b:
                    boundary.append((f, Boundary("absorbing", float(b["absorbing"]))))
                else:
                    raise ConfigError(f"bad boundary spec for face {f}: {b!r}")
            grid = GridSpec(int(g["nx"]), int(g["ny"]), int(g["nz"]),
                            float(g["voxel_width"]), float(g["diffusion"]),
                            tuple(boundary))
            tx = None
            if "transmitter" in doc:
                t = doc["transmitter"]
                voxel = t["voxel"]
                if isinstance(voxel, (list, tuple)):
                    voxel = voxel_index(*voxel, grid)
                tx = TransmitterSpec(
                    voxel=int(voxel),
                    symbols=tuple(
                        tuple(Reaction(tuple(r.get("reactants", [])),
                                       tuple(r.get("products", [])),
                                       float(r["rate"]))
                              for r in rs)
                        for rs in t["symbols"]
                    ),
                    intermediates=tuple(t.get("intermediates", [])),
                    initial_counts=tuple((sp, int(c)) for sp, c
                                         in t.get("initial_counts", {}).items()),
                    random_initial=tuple(
                        BernoulliInitial(
                            float(r["prob"]),
                            tuple((sp, int(c)) for sp, c in r["counts_if"].items()),
                            tuple((sp, int(c)) for sp, c
                                  in r.get("counts_else", {}).items()))
                        for r in t.get("random_initial", [])
                    ),
                )
            rx = None
            if "receiver" in doc:
                r = doc["receiver"]
                voxel = r["voxel"]
                if isinstance(voxel, (list, tuple)):
                    voxel = voxel_index(*voxel, grid)
                rx = ReceiverSpec(voxel=int(voxel),
                                  receptor_count=int(r["receptors"]),
                                  binding_rate=float(r["binding_rate"]),
                                  unbinding_rate=float(r["unbinding_rate"]),
                                  binding_propensity=r.get("binding_propensity"))
            return cls(grid=grid, transmitter=tx, receiver=rx)
        except (KeyError, TypeError) as exc:
            raise ConfigError(f"malformed model specification: {exc!r}") from exc

    def save(self, path) -> None:
        with open(path, "w") as fh:
            yaml.safe_dump(self.to_dict(), fh, sort_keys=True)

    @classmethod
    def load(cls, path) -> "ModelSpec":
        with open(path) as fh:
            doc = yaml.safe_load(fh)
        if not isinstance(doc, Mapping):
            raise ConfigError(f"model file {path} does not contain a mapping")
        return cls.from_dict(doc)
