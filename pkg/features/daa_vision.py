"""Synthetic intruder imagery and the objectness detector trained on it.

An intruder is drawn as a dark anti-aliased disk on a noisy sky. Its image
position comes from azimuth and elevation, its radius from the slant range.

The detector splits a frame into an 8 x 8 grid of cells and scores every cell
with one shared ``PerceptionNet`` patch classifier (a sigmoid "intruder in this
cell" output). Image objectness is the best cell score and the reported center
is that cell's center, so a hit is off by at most half a cell diagonal.
"""
import logging
import math
from dataclasses import dataclass

import numpy as np

from algorithms import distdp, perceptnet
from algorithms.perceptnet import PerceptionNet
from features.daa import MAX_TAU, objectness_risk

logger = logging.getLogger(__name__)

DETECTOR_CELLS = 8


@dataclass(frozen=True)
class SkyCamera:
    size: int = 32
    noise_sigma: float = 0.03
    fov_vertical: float = 20.0
    fov_horizontal: float = 40.0
    wingspan: float = 11.0
    min_radius: float = 0.3
    sky: float = 0.8
    contrast: float = 0.7
    range_offset: float = 100.0

    @property
    def focal(self):
        """Vertical focal length in pixels."""
        return (self.size / 2.0) / math.tan(math.radians(self.fov_vertical))

    @property
    def focal_x(self):
        """Horizontal focal length in pixels; the square frame spans the wider horizontal field."""
        return (self.size / 2.0) / math.tan(math.radians(self.fov_horizontal))


@dataclass(frozen=True, eq=False)
class EncounterGeometry:
    ownship_speed: np.ndarray
    intruder_speed: np.ndarray
    relative_heading: np.ndarray

    def relative_velocity(self):
        """Intruder minus ownship horizontal velocity with the ownship flying along +x, shape (n, 2)."""
        psi = np.radians(self.relative_heading)
        return np.stack([self.intruder_speed * np.cos(psi) - self.ownship_speed,
                         self.intruder_speed * np.sin(psi)], axis=-1)


def sample_geometry(n, rng, speed=(45.0, 55.0), heading=(120.0, 240.0)):
    return EncounterGeometry(rng.uniform(*speed, n), rng.uniform(*speed, n), rng.uniform(*heading, n))


def render_views(azimuth, elevation, slant_range, camera, rng, present=None):
    """Images (n, size * size) and labels for intruders seen at the given angles (radians).

    Returns ``(images, presence, centers)``; centers are pixel (x, y) and NaN
    for images without a visible intruder.
    """
    azimuth, elevation, slant_range = np.broadcast_arrays(
        *(np.atleast_1d(np.asarray(x, dtype=float)) for x in (azimuth, elevation, slant_range)))
    n, size = azimuth.size, camera.size
    visible = (np.abs(azimuth) <= math.radians(camera.fov_horizontal)) & \
              (np.abs(elevation) <= math.radians(camera.fov_vertical))
    if present is not None:
        visible &= np.asarray(present, dtype=bool)
    cx = size / 2.0 + camera.focal_x * np.tan(azimuth)
    cy = size / 2.0 - camera.focal * np.tan(elevation)
    radius = np.maximum(0.5 * camera.wingspan * camera.focal / slant_range, camera.min_radius)

    coords = np.arange(size) + 0.5
    px, py = np.meshgrid(coords, coords, indexing="xy")
    dist = np.hypot(px[None] - cx[:, None, None], py[None] - cy[:, None, None])
    coverage = np.clip(radius[:, None, None] + 0.5 - dist, 0.0, 1.0) * visible[:, None, None]
    images = camera.sky - camera.contrast * coverage
    if camera.noise_sigma > 0:
        images = images + rng.normal(0.0, camera.noise_sigma, size=images.shape)
    centers = np.where(visible[:, None], np.stack([cx, cy], axis=-1), np.nan)
    return np.clip(images, 0.0, 1.0).reshape(n, -1), visible.astype(float), centers


def state_view(h, tau, geometry, camera):
    """Azimuth, elevation and slant range of an intruder at (h, tau) for sampled speeds and headings."""
    v_rel = geometry.relative_velocity()
    closure = np.hypot(v_rel[:, 0], v_rel[:, 1])
    horizontal = camera.range_offset + np.asarray(tau, float) * closure
    azimuth = np.arctan2(-v_rel[:, 1], -v_rel[:, 0])
    elevation = np.arctan2(-np.asarray(h, float), horizontal)
    return azimuth, elevation, np.hypot(horizontal, h)


def render_state(h, tau, geometry, camera, rng):
    return render_views(*state_view(h, tau, geometry, camera), camera, rng)


@dataclass(frozen=True, eq=False)
class DetectionDataset:
    images: np.ndarray
    states: np.ndarray
    presence: np.ndarray
    centers: np.ndarray
    provenance: str
    size: int

    def __len__(self):
        return len(self.images)

    def cell_targets(self, cells=DETECTOR_CELLS):
        """One-hot (n, cells ** 2) map of the cell holding each visible intruder; all zero when absent."""
        heat = np.zeros((len(self), cells * cells))
        present = np.flatnonzero(self.presence > 0)
        heat[present, cell_index(self.centers[present], self.size, cells)] = 1.0
        return heat


def _uniform_states(n, rng, h_range=300.0, max_tau=MAX_TAU):
    return np.column_stack([rng.integers(0, max_tau + 1, n).astype(float), rng.uniform(-h_range, h_range, n)])


def generate_detection_dataset(kind, n, table=None, alpha=0.0, camera=SkyCamera(), seed=0,
                               negative_fraction=0.2, inside_fov=False):
    """Render ``n`` labeled sky images.

    ``kind`` is ``"uniform"`` (tau, h uniform over the controller ranges) or
    ``"risk_weighted"`` ((tau, h) drawn with density proportional to the DAA
    risk weight of a marginal ``table``). A ``negative_fraction`` of the images
    holds no intruder. With ``inside_fov`` uniform states are redrawn until the
    intruder is in view.
    """
    if n < 1:
        raise ValueError("dataset size must be at least 1")
    state_seed, geometry_seed, render_seed = np.random.SeedSequence(seed).spawn(3)
    state_rng, geometry_rng = np.random.default_rng(state_seed), np.random.default_rng(geometry_seed)
    n_neg = int(round(n * negative_fraction))
    n_pos = n - n_neg

    if kind == "uniform":
        states = _uniform_states(n_pos, state_rng)
    elif kind == "risk_weighted":
        if table is None:
            raise ValueError("risk-weighted data needs a marginal DAA risk table")
        states = distdp.rejection_sample_states(table, alpha, n_pos, state_seed) if n_pos else np.empty((0, 2))
    else:
        raise ValueError(f"unknown dataset kind {kind!r}")
    states = np.vstack([states, _uniform_states(n_neg, state_rng)])
    geometry = sample_geometry(n, geometry_rng)
    present = np.arange(n) < n_pos

    for _ in range(100 if inside_fov else 0):
        _, elevation, _ = state_view(states[:, 1], states[:, 0], geometry, camera)
        out = present & (np.abs(elevation) > math.radians(camera.fov_vertical))
        if not out.any():
            break
        states[out] = _uniform_states(int(out.sum()), state_rng)

    views = state_view(states[:, 1], states[:, 0], geometry, camera)
    images, presence, centers = render_views(*views, camera, np.random.default_rng(render_seed), present=present)
    return DetectionDataset(images, states, presence, centers, kind, camera.size)


def patch_side(size, cells=DETECTOR_CELLS):
    if size % cells:
        raise ValueError(f"image size {size} is not a multiple of the {cells} detector cells")
    return size // cells


def cell_index(centers, size, cells=DETECTOR_CELLS):
    """Row-major index of the cell holding each pixel (x, y) center."""
    centers = np.atleast_2d(np.asarray(centers, dtype=float))
    col, row = np.clip(np.floor(centers / (size / cells)), 0, cells - 1).astype(int).T
    return row * cells + col


def cell_centers(index, size, cells=DETECTOR_CELLS):
    side = size / cells
    index = np.asarray(index)
    return np.stack([(index % cells + 0.5) * side, (index // cells + 0.5) * side], axis=-1)


def darkness_patches(images, camera):
    """Cut (n, size * size) frames into (n * cells ** 2, side ** 2) patches of darkness below the sky.

    Patches follow the row-major cell order; darkness is scaled by the camera
    contrast so a fully covered pixel reads about one.
    """
    images = np.atleast_2d(np.asarray(images, dtype=float))
    side, k = patch_side(camera.size), DETECTOR_CELLS
    blocks = images.reshape(len(images), k, side, k, side).transpose(0, 1, 3, 2, 4)
    return (camera.sky - blocks.reshape(-1, side * side)) / camera.contrast


def new_detector(camera=SkyCamera(), hidden=(64, 64), seed=0):
    return PerceptionNet((patch_side(camera.size) ** 2,) + tuple(hidden) + (1,), "sigmoid", seed=seed)


class CellScorer:
    """Applies a patch classifier to every cell, giving one (n, cells ** 2) score map per batch of frames."""

    def __init__(self, net, camera):
        self.net = net
        self.camera = camera
        self.params = net.params

    def forward_cache(self, images):
        out, cache = self.net.forward_cache(darkness_patches(images, self.camera))
        return out.reshape(-1, DETECTOR_CELLS * DETECTOR_CELLS), cache

    def forward(self, images):
        return self.forward_cache(images)[0]

    def backward(self, cache, upstream):
        return self.net.backward(cache, upstream.reshape(-1, 1))


def train_detector(net, dataset, config, table=None, camera=None, progress=False):
    """Per-cell cross-entropy with the intruder cell and the empty cells weighted equally per frame.

    The risk loss adds ``lam`` times the objectness-interpolated risk of each
    present intruder, divided by the largest cost. The objectness of a present
    intruder is the score of the cell that holds it.
    """
    if config.loss == "risk" and table is None:
        raise ValueError("the risk-sensitive loss needs a marginal DAA risk table")
    camera = camera or SkyCamera(size=dataset.size)
    if camera.size != dataset.size:
        raise ValueError(f"camera size {camera.size} does not match {dataset.size}-pixel images")
    heat = dataset.cell_targets()
    n_cells = heat.shape[1]
    weights = np.where(heat > 0, 1.0, 1.0 / max(n_cells - 1, 1))
    target_cell = heat.argmax(axis=1)
    present = dataset.presence > 0
    if config.loss == "risk":
        scale = float(table.cost_support[-1])
        missed, slope = objectness_risk(table, dataset.states, np.zeros(len(dataset)), config.alpha)
        missed = np.where(present, missed / scale, 0.0)
        slope = np.where(present, slope / scale, 0.0)

    def loss_fn(batch, out):
        n = len(batch)
        loss, dout = perceptnet.bce_and_grad(heat[batch], out, weight=weights[batch] / n)
        if config.loss == "risk" and config.lam > 0:
            rows, cols = np.arange(n), target_cell[batch]
            mask = present[batch]
            risk = missed[batch] + out[rows, cols] * slope[batch]
            loss += config.lam * float(np.sum(risk[mask])) / n
            dout[rows, cols] += config.lam * slope[batch] / n
        return loss, dout

    _, report = perceptnet.fit(CellScorer(net, camera), dataset.images, loss_fn, config, progress=progress)
    return net, report


class Detector:
    def __init__(self, net, camera=SkyCamera(), threshold=0.5):
        self.net = net
        self.camera = camera
        self.threshold = threshold

    def cell_scores(self, images):
        patches = darkness_patches(images, self.camera)
        return self.net.forward(patches).reshape(-1, DETECTOR_CELLS * DETECTOR_CELLS)

    def predict(self, images):
        """Objectness (best cell score) and pixel centers of the best cell for a batch of images."""
        scores = self.cell_scores(images)
        best = scores.argmax(axis=1)
        return scores[np.arange(len(scores)), best], cell_centers(best, self.camera.size)

    def detect(self, images):
        return self.predict(images)[0] > self.threshold


def precision_recall(detector, dataset, center_tolerance=3.0):
    """A detection counts as correct when the intruder is present and the center is within tolerance."""
    p_hat, centers = detector.predict(dataset.images)
    fired = p_hat > detector.threshold
    present = dataset.presence > 0
    err = np.hypot(*(np.nan_to_num(centers - dataset.centers, nan=np.inf)).T)
    hit = fired & present & (err <= center_tolerance)
    positives = int(fired.sum())
    precision = hit.sum() / positives if positives else 0.0
    recall = hit.sum() / present.sum() if present.any() else 0.0
    return float(precision), float(recall)
