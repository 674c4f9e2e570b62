import numpy as np
import pytest

from algorithms.perceptnet import TrainConfig
from features import daa, daa_vision
from features.daa_vision import Detector, EncounterGeometry, SkyCamera

HEAD_ON = EncounterGeometry(np.array([50.0]), np.array([50.0]), np.array([180.0]))
CLEAN = SkyCamera(noise_sigma=0.0)


def blob_mass(image, camera=CLEAN):
    return float(np.sum(camera.sky - image))


def test_head_on_intruder_is_straight_ahead():
    azimuth, elevation, slant = daa_vision.state_view(0.0, 10, HEAD_ON, CLEAN)
    assert azimuth[0] == pytest.approx(0.0, abs=1e-12)
    assert elevation[0] == pytest.approx(0.0)
    assert slant[0] == pytest.approx(100.0 + 10 * 100.0)


def test_distant_blob_is_smaller():
    rng = np.random.default_rng(0)
    near, _, _ = daa_vision.render_state(20.0, 5, HEAD_ON, CLEAN, rng)
    far, _, _ = daa_vision.render_state(20.0, 40, HEAD_ON, CLEAN, rng)
    assert blob_mass(far[0]) < blob_mass(near[0])


def test_level_intruder_is_vertically_centered():
    images, presence, centers = daa_vision.render_state(0.0, 12, HEAD_ON, CLEAN, np.random.default_rng(0))
    assert presence[0] == 1.0
    assert abs(centers[0, 1] - CLEAN.size / 2) <= 1.0
    rows = images[0].reshape(CLEAN.size, CLEAN.size)
    darkest_row = np.argmin(rows.min(axis=1))
    assert abs(darkest_row + 0.5 - CLEAN.size / 2) <= 1.0


def test_intruder_below_appears_low_in_the_frame():
    _, _, above = daa_vision.render_state(30.0, 10, HEAD_ON, CLEAN, np.random.default_rng(0))
    _, _, below = daa_vision.render_state(-30.0, 10, HEAD_ON, CLEAN, np.random.default_rng(0))
    # positive h means the ownship is above, so the intruder sits below the horizon
    assert above[0, 1] > CLEAN.size / 2 > below[0, 1]


def test_out_of_view_intruder_is_absent():
    images, presence, centers = daa_vision.render_state(290.0, 1, HEAD_ON, CLEAN, np.random.default_rng(0))
    assert presence[0] == 0.0
    assert np.all(np.isnan(centers[0]))
    np.testing.assert_allclose(images[0], CLEAN.sky)


def test_geometry_sampling_ranges():
    g = daa_vision.sample_geometry(1000, np.random.default_rng(1))
    assert g.ownship_speed.min() >= 45.0 and g.ownship_speed.max() <= 55.0
    assert g.relative_heading.min() >= 120.0 and g.relative_heading.max() <= 240.0
    assert g.relative_velocity().shape == (1000, 2)


def test_uniform_dataset_labels():
    camera = SkyCamera(size=16)
    data = daa_vision.generate_detection_dataset("uniform", 200, camera=camera, seed=3, negative_fraction=0.25)
    assert data.images.shape == (200, 256)
    assert data.presence[150:].sum() == 0
    heat = data.cell_targets()
    assert heat.shape == (200, 64)
    np.testing.assert_array_equal(heat.sum(axis=1), data.presence)
    assert data.states[:, 0].min() >= 0 and data.states[:, 0].max() <= daa.MAX_TAU
    again = daa_vision.generate_detection_dataset("uniform", 200, camera=camera, seed=3, negative_fraction=0.25)
    np.testing.assert_array_equal(data.images, again.images)


def test_inside_fov_redraws_hidden_intruders():
    camera = SkyCamera(size=16)
    data = daa_vision.generate_detection_dataset("uniform", 100, camera=camera, seed=4, negative_fraction=0.0,
                                                 inside_fov=True)
    assert data.presence.sum() == 100


def test_risk_weighted_dataset_needs_table():
    with pytest.raises(ValueError):
        daa_vision.generate_detection_dataset("risk_weighted", 10)
    with pytest.raises(ValueError):
        daa_vision.generate_detection_dataset("sky", 10)


def test_risk_weighted_dataset_follows_weight(daa_tables):
    marginal, _ = daa_tables
    data = daa_vision.generate_detection_dataset("risk_weighted", 100, table=marginal, alpha=0.0,
                                                 camera=SkyCamera(size=16), seed=5)
    # tau = 0 carries no weight
    assert np.all(data.states[:80, 0] > 0)
    assert data.provenance == "risk_weighted"


def test_risk_loss_training_runs(daa_tables):
    marginal, _ = daa_tables
    camera = SkyCamera(size=16)
    data = daa_vision.generate_detection_dataset("uniform", 200, camera=camera, seed=6)
    net = daa_vision.new_detector(camera, hidden=(32,), seed=0)
    config = TrainConfig(epochs=15, batch_size=32, loss="risk", lam=1.0, alpha=0.0, seed=0)
    net, report = daa_vision.train_detector(net, data, config, table=marginal, camera=camera)
    assert report.trace[-1] < report.trace[0]
    with pytest.raises(ValueError):
        daa_vision.train_detector(net, data, config)


def test_precision_recall_of_an_oracle():
    camera = SkyCamera(size=16)
    data = daa_vision.generate_detection_dataset("uniform", 50, camera=camera, seed=7)

    class Oracle:
        def forward(self, patches):
            assert patches.shape == (50 * 64, 4)
            return data.cell_targets().reshape(-1, 1)

    precision, recall = daa_vision.precision_recall(Detector(Oracle(), camera), data)
    assert precision == 1.0
    assert recall == 1.0
    assert Detector(Oracle(), camera).detect(data.images).sum() == data.presence.sum()


def test_uniform_states_cover_every_tau():
    states = daa_vision._uniform_states(5000, np.random.default_rng(0))
    assert set(states[:, 0].astype(int)) == set(range(daa.MAX_TAU + 1))
    assert np.abs(states[:, 1]).max() <= 300.0


def test_cells_are_row_major():
    assert daa_vision.cell_index([[0.5, 0.5], [31.9, 0.2], [4.0, 4.0], [32.0, 32.0]], 32).tolist() == [0, 7, 9, 63]
    np.testing.assert_allclose(daa_vision.cell_centers([0, 9, 63], 32), [[2.0, 2.0], [6.0, 6.0], [30.0, 30.0]])
    with pytest.raises(ValueError):
        daa_vision.patch_side(20)


def test_patches_hold_the_darkness_of_their_cell():
    camera = SkyCamera(size=16, noise_sigma=0.0)
    image = np.full((16, 16), camera.sky)
    image[5, 12] = camera.sky - camera.contrast
    patches = daa_vision.darkness_patches(image.reshape(1, -1), camera)
    assert patches.shape == (64, 4)
    # pixel (x=12, y=5) sits in cell row 2, column 6
    hot = np.flatnonzero(patches.max(axis=1) > 0)
    assert hot.tolist() == [2 * 8 + 6]
    assert patches.max() == pytest.approx(1.0)


@pytest.mark.slow
def test_detector_learns_to_find_intruders():
    camera = SkyCamera()
    train = daa_vision.generate_detection_dataset("uniform", 2000, camera=camera, seed=8, inside_fov=True)
    validation = daa_vision.generate_detection_dataset("uniform", 500, camera=camera, seed=9, inside_fov=True)
    net, _ = daa_vision.train_detector(daa_vision.new_detector(camera, seed=1), train,
                                       TrainConfig(epochs=100, batch_size=32, seed=2), camera=camera)
    _, recall = daa_vision.precision_recall(Detector(net, camera), validation)
    assert recall > 0.5
