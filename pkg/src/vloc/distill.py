"""Distillation of virtual-view features onto real-image teachers.

Two small two-layer perceptrons act as students: one maps GeM-pooled
projection statistics to the teacher's global descriptor, the other
revises each populated feature-grid cell toward the teacher's dense
descriptor grid of the real image at the same pose.  Gradients are
hand-written (and finite-difference checked) so training has no
framework dependency.

Head layers can be initialized by a least-squares fit to the teacher
outputs over an init batch and frozen, in which case SGD only trains
the first layer.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import NoOverlapError, ShapeMismatchError
from .features import GLOBAL_DIM, descriptor_grid, image_global_descriptor
from .geometry import Pose
from .rng import SplitMix64
from .scene_db import nearest_keyframes
from .virtual_view import (ProjectedView, global_student_input,
                           local_student_inputs, render_projection)

_CKPT_MAGIC = b"VLST"
_CKPT_VERSION = 1

DEFAULT_HIDDEN = 256
DEFAULT_LR = 1e-3
DEFAULT_BATCH = 24
DEFAULT_EPOCHS = 10
LR_DECAY_EPOCH = 8
LR_DECAY = 0.1
LOSS_WEIGHT_LOCAL = 1.0


@dataclass
class Mlp:
    w1: np.ndarray  # (hidden, din)
    b1: np.ndarray  # (hidden,)
    w2: np.ndarray  # (dout, hidden)
    b2: np.ndarray  # (dout,)

    def forward(self, x: np.ndarray) -> np.ndarray:
        h = np.tanh(np.atleast_2d(x) @ self.w1.T + self.b1)
        return h @ self.w2.T + self.b2

    def params(self) -> list[tuple[str, np.ndarray]]:
        return [("w1", self.w1), ("b1", self.b1),
                ("w2", self.w2), ("b2", self.b2)]


@dataclass
class StudentParams:
    global_net: Mlp
    local_net: Mlp
    gem_p: float = 3.0
    freeze_head: bool = True
    learning_rate: float = DEFAULT_LR
    batch_size: int = DEFAULT_BATCH

    def global_from_view(self, view: ProjectedView) -> np.ndarray:
        return self.global_net.forward(
            global_student_input(view, self.gem_p))[0]

    def local_map(self, view: ProjectedView) -> np.ndarray:
        """Revised descriptor map, zero at cells with no projection."""
        inputs, ci, cj = local_student_inputs(view)
        gh, gw, _ = view.feature_grid.shape
        out = np.zeros((gh, gw, self.local_net.w2.shape[0]))
        out[ci, cj] = self.local_net.forward(inputs)
        return out

    def params(self) -> list[tuple[str, np.ndarray]]:
        return ([("g." + n, a) for n, a in self.global_net.params()]
                + [("l." + n, a) for n, a in self.local_net.params()])

    def all_finite(self) -> bool:
        return all(np.isfinite(a).all() for _, a in self.params())


@dataclass
class TrainingPair:
    input: ProjectedView
    target_global: np.ndarray   # (m,) unit norm
    target_local: np.ndarray    # (gh, gw, n), unit norm per nonzero cell


def init_student(n: int = 128, m: int = GLOBAL_DIM, hidden: int = DEFAULT_HIDDEN,
                 seed: int = 0, gem_p: float = 3.0,
                 freeze_head: bool = True,
                 input_gain: float = 4.0) -> StudentParams:
    """Random student; input_gain compensates the ~0.1-scale components
    of pooled descriptor inputs so hidden units start in tanh's active
    range."""
    rng = np.random.default_rng(seed)
    din = n + 3  # descriptor + cell color statistics

    def mlp(dout):
        return Mlp(rng.normal(0, input_gain / np.sqrt(din), (hidden, din)),
                   np.zeros(hidden),
                   rng.normal(0, 1 / np.sqrt(hidden), (dout, hidden)),
                   np.zeros(dout))

    return StudentParams(mlp(m), mlp(n), gem_p=gem_p, freeze_head=freeze_head)


def make_training_pair(scene, view_pose: Pose, gem_p: float = 3.0,
                       num_sources: int = 4) -> TrainingPair:
    """Projection input at a pose plus teacher targets of its real image.

    Sources are the nearest keyframes by camera center, excluding any
    keyframe sitting at the pose itself.
    """
    db = scene.database
    exclude = {kf.id for kf in db.keyframes
               if np.linalg.norm(kf.pose.camera_center
                                 - view_pose.camera_center) < 1e-9}
    sources = nearest_keyframes(db, view_pose, num_sources, exclude=exclude)
    k = db.keyframes[0].intrinsics
    view = render_projection(db, view_pose, k, sources)
    if not view.mask.any():
        raise NoOverlapError("no source content projects into this pose")

    image, _ = scene.render(view_pose, k)
    grid = descriptor_grid(image).astype(np.float64)
    target_global = image_global_descriptor(
        image, p=gem_p, desc_grid=grid.astype(np.float32)).astype(np.float64)
    return TrainingPair(view, target_global, grid)


def sample_training_pairs(scene, count: int, seed: int = 0,
                          gem_p: float = 3.0,
                          jitter_pos: float = 0.3,
                          jitter_yaw_deg: float = 10.0) -> list[TrainingPair]:
    """`count` pairs at database poses jittered in position and yaw."""
    from .geometry import axis_angle_matrix

    rng = np.random.default_rng(seed)
    db = scene.database
    pairs: list[TrainingPair] = []
    attempts = 0
    while len(pairs) < count and attempts < 20 * count:
        kf = db.keyframes[attempts % len(db.keyframes)]
        attempts += 1
        center = kf.pose.camera_center + rng.uniform(
            -jitter_pos, jitter_pos, 3) * np.array([1, 1, 0.3])
        yaw = np.radians(rng.uniform(-jitter_yaw_deg, jitter_yaw_deg))
        rot = kf.pose.rotation @ axis_angle_matrix([0, 0, 1], yaw).T
        pose = Pose(rot, -rot @ center)
        try:
            pairs.append(make_training_pair(scene, pose, gem_p=gem_p))
        except NoOverlapError:
            continue
    if len(pairs) < count:
        raise NoOverlapError(f"only {len(pairs)}/{count} pairs had overlap")
    return pairs


# -- loss and gradients ----------------------------------------------------

def _check_shapes(student: StudentParams, pair: TrainingPair) -> None:
    m = student.global_net.w2.shape[0]
    n = student.local_net.w2.shape[0]
    if pair.target_global.shape != (m,):
        raise ShapeMismatchError(
            f"global target {pair.target_global.shape} != ({m},)")
    gh, gw, d = pair.input.feature_grid.shape
    if pair.target_local.shape != (gh, gw, n):
        raise ShapeMismatchError(
            f"local target {pair.target_local.shape} != ({gh}, {gw}, {n})")
    if d + 3 != student.local_net.w1.shape[1]:
        raise ShapeMismatchError("feature grid dim does not fit the student")


def distill_loss(student: StudentParams,
                 pair: TrainingPair) -> tuple[float, float]:
    """(global loss, masked local loss) for one pair.

    loss_g = ||student_G(view) - target||^2; loss_l averages squared
    cell distances over populated cells only and is exactly 0 when the
    mask is all false.
    """
    _check_shapes(student, pair)
    g = student.global_from_view(pair.input)
    loss_g = float(((g - pair.target_global) ** 2).sum())

    if not pair.input.mask.any():
        return loss_g, 0.0
    inputs, ci, cj = local_student_inputs(pair.input)
    pred = student.local_net.forward(inputs)
    resid = pred - pair.target_local[ci, cj]
    loss_l = float((resid ** 2).sum() / max(1, len(ci)))
    return loss_g, loss_l


def _zero_grads(student: StudentParams) -> dict[str, np.ndarray]:
    return {name: np.zeros_like(arr) for name, arr in student.params()}


def _accumulate_pair_grads(student: StudentParams, pair: TrainingPair,
                           grads: dict[str, np.ndarray],
                           lam: float) -> tuple[float, float]:
    """Adds d(loss_g + lam*loss_l)/d(params) for one pair into grads."""
    _check_shapes(student, pair)
    net_g = student.global_net
    x = global_student_input(pair.input, student.gem_p)
    h_pre = net_g.w1 @ x + net_g.b1
    h = np.tanh(h_pre)
    y = net_g.w2 @ h + net_g.b2
    r = y - pair.target_global
    loss_g = float((r ** 2).sum())
    dy = 2.0 * r
    grads["g.w2"] += np.outer(dy, h)
    grads["g.b2"] += dy
    dh = (net_g.w2.T @ dy) * (1.0 - h ** 2)
    grads["g.w1"] += np.outer(dh, x)
    grads["g.b1"] += dh

    if not pair.input.mask.any():
        return loss_g, 0.0
    net_l = student.local_net
    inputs, ci, cj = local_student_inputs(pair.input)
    hm = np.tanh(inputs @ net_l.w1.T + net_l.b1)
    ym = hm @ net_l.w2.T + net_l.b2
    rm = ym - pair.target_local[ci, cj]
    count = max(1, len(ci))
    loss_l = float((rm ** 2).sum() / count)
    dym = (2.0 / count) * rm * lam
    grads["l.w2"] += dym.T @ hm
    grads["l.b2"] += dym.sum(axis=0)
    dhm = (dym @ net_l.w2) * (1.0 - hm ** 2)
    grads["l.w1"] += dhm.T @ inputs
    grads["l.b1"] += dhm.sum(axis=0)
    return loss_g, loss_l


def batch_loss_and_grads(student: StudentParams, pairs: list[TrainingPair],
                         lam: float = LOSS_WEIGHT_LOCAL):
    """Mean losses and mean combined-gradient over a batch."""
    grads = _zero_grads(student)
    sum_g, sum_l = 0.0, 0.0
    for pair in pairs:
        lg, ll = _accumulate_pair_grads(student, pair, grads, lam)
        sum_g += lg
        sum_l += ll
    scale = 1.0 / max(1, len(pairs))
    for name in grads:
        grads[name] *= scale
    return sum_g * scale, sum_l * scale, grads


def fit_heads(student: StudentParams, pairs: list[TrainingPair],
              ridge: float = 1e-2) -> None:
    """Least-squares fit of both output layers to teacher targets.

    Uses the current first-layer features on the init batch; combined
    with freeze_head this mirrors a fixed, teacher-initialized head.
    The ridge keeps head weights bounded so later first-layer SGD stays
    stable.
    """
    xg = np.stack([global_student_input(p.input, student.gem_p)
                   for p in pairs])
    hg = np.tanh(xg @ student.global_net.w1.T + student.global_net.b1)
    tg = np.stack([p.target_global for p in pairs])
    sol = _ridge_lstsq(hg, tg, ridge)
    student.global_net.w2 = sol[:-1].T.copy()
    student.global_net.b2 = sol[-1].copy()

    xs, ts = [], []
    for p in pairs:
        if not p.input.mask.any():
            continue
        inputs, ci, cj = local_student_inputs(p.input)
        xs.append(inputs)
        ts.append(p.target_local[ci, cj])
    if xs:
        xl = np.concatenate(xs)
        hl = np.tanh(xl @ student.local_net.w1.T + student.local_net.b1)
        sol = _ridge_lstsq(hl, np.concatenate(ts), ridge)
        student.local_net.w2 = sol[:-1].T.copy()
        student.local_net.b2 = sol[-1].copy()


def _ridge_lstsq(h: np.ndarray, t: np.ndarray, ridge: float) -> np.ndarray:
    """argmin ||[H 1] A - T||^2 + ridge ||A||^2, returns (hidden+1, out)."""
    a = np.concatenate([h, np.ones((len(h), 1))], axis=1)
    ata = a.T @ a + ridge * np.eye(a.shape[1])
    return np.linalg.solve(ata, a.T @ t)


def train(student: StudentParams, pairs: list[TrainingPair],
          epochs: int = DEFAULT_EPOCHS, batch_size: int | None = None,
          lr: float | None = None, seed: int = 0,
          lam: float = LOSS_WEIGHT_LOCAL):
    """Mini-batch SGD on loss_g + lam * loss_l.

    Deterministic given the seed; returns (student, history) where
    history rows are (step, loss_g, loss_l).  Frozen heads keep their
    initial weights.
    """
    if not pairs:
        raise ValueError("training needs at least one pair")
    batch_size = batch_size or student.batch_size
    lr = student.learning_rate if lr is None else lr
    frozen = {"g.w2", "g.b2", "l.w2", "l.b2"} if student.freeze_head else set()
    params = dict(student.params())
    history: list[tuple[int, float, float]] = []
    step = 0
    for epoch in range(epochs):
        lr_e = lr * (LR_DECAY if epoch >= LR_DECAY_EPOCH else 1.0)
        order = np.random.default_rng(seed * 1000003 + epoch).permutation(len(pairs))
        for start in range(0, len(pairs), batch_size):
            batch = [pairs[i] for i in order[start:start + batch_size]]
            loss_g, loss_l, grads = batch_loss_and_grads(student, batch, lam)
            for name, arr in params.items():
                if name not in frozen:
                    arr -= lr_e * grads[name]
            history.append((step, loss_g, loss_l))
            step += 1
    return student, history


def gradient_check(student: StudentParams, pair: TrainingPair,
                   epsilon: float = 1e-5, num_weights: int = 60,
                   seed: int = 0, lam: float = LOSS_WEIGHT_LOCAL) -> float:
    """Max relative error between analytic and central-difference grads.

    Samples num_weights (>= 50) scalar parameters across both nets; the
    relative error is |ga - gfd| / max(1e-12, |ga| + |gfd|).
    """
    if not 1e-7 <= epsilon <= 1e-3:
        raise ValueError("epsilon out of the supported range")
    _, _, grads = batch_loss_and_grads(student, [pair], lam)
    params = student.params()
    sizes = [arr.size for _, arr in params]
    total = sum(sizes)
    rng = SplitMix64(seed)
    worst = 0.0
    for _ in range(max(50, num_weights)):
        flat = rng.next_index(total)
        for (name, arr), size in zip(params, sizes):
            if flat < size:
                break
            flat -= size
        orig = arr.flat[flat]
        arr.flat[flat] = orig + epsilon
        lg, ll = distill_loss(student, pair)
        up = lg + lam * ll
        arr.flat[flat] = orig - epsilon
        lg, ll = distill_loss(student, pair)
        down = lg + lam * ll
        arr.flat[flat] = orig
        g_fd = (up - down) / (2.0 * epsilon)
        g_an = grads[name].flat[flat]
        denom = max(1e-12, abs(g_an) + abs(g_fd))
        worst = max(worst, abs(g_an - g_fd) / denom)
    return worst


# -- checkpoint io ---------------------------------------------------------

def save_student(path, student: StudentParams) -> None:
    n = student.local_net.w2.shape[0]
    m = student.global_net.w2.shape[0]
    hidden = student.global_net.w1.shape[0]
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<IIII", n, m, hidden, _CKPT_VERSION))
        for _, arr in student.params():
            fh.write(arr.astype("<f4").tobytes())


def load_student(path, gem_p: float = 3.0,
                 freeze_head: bool = True) -> StudentParams:
    with open(path, "rb") as fh:
        if fh.read(4) != _CKPT_MAGIC:
            raise ValueError(f"not a student checkpoint: {path}")
        n, m, hidden, _version = struct.unpack("<IIII", fh.read(16))
        din = n + 3

        def read(shape):
            cnt = int(np.prod(shape))
            arr = np.frombuffer(fh.read(cnt * 4), dtype="<f4")
            return arr.reshape(shape).astype(np.float64)

        gnet = Mlp(read((hidden, din)), read((hidden,)),
                   read((m, hidden)), read((m,)))
        lnet = Mlp(read((hidden, din)), read((hidden,)),
                   read((n, hidden)), read((n,)))
    return StudentParams(gnet, lnet, gem_p=gem_p, freeze_head=freeze_head)


def save_loss_history(path, history: list[tuple[int, float, float]]) -> None:
    with open(path, "w") as fh:
        fh.write("step,loss_g,loss_l\n")
        for step, lg, ll in history:
            fh.write(f"{step},{lg:.9g},{ll:.9g}\n")
