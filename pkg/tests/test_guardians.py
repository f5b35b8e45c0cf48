import numpy as np
import pytest

from contextguard.errors import (
    CorpusFormatError,
    InsufficientProfilesError,
    ShapeMismatchError,
)
from contextguard.guardians import (
    AutoencoderTrainConfig,
    ThresholdTable,
    calibrate_thresholds,
    init_autoencoder,
    load_autoencoder,
    load_threshold_table,
    loss_and_grads,
    reconstruction_error,
    reconstruction_errors,
    save_autoencoder,
    save_threshold_table,
    threshold_at_fpr,
    train_autoencoder,
)
from contextguard.numkit import grad_check
from contextguard.sceme import ScemeTrainConfig, extract_context_profiles, train_sceme
from contextguard.synthworld import default_world_config, generate_corpus, make_world


def random_profiles(n, d, seed=0):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, 5, d))
    x[:, 1:, :] = 1.0 / (1.0 + np.exp(-x[:, 1:, :]))  # gate rows in (0, 1)
    return x


# ---------------------------------------------------------------------------
# Mechanics
# ---------------------------------------------------------------------------


def test_reconstruction_shapes_and_determinism():
    ae = init_autoencoder(0, 16, seed=1)
    x = random_profiles(4, 16)
    errs1 = reconstruction_errors(ae, x)
    errs2 = reconstruction_errors(ae, x)
    assert errs1.shape == (4,)
    np.testing.assert_array_equal(errs1, errs2)
    # scoring one by one agrees with the batch path (up to BLAS
    # reduction-order noise in the last bit)
    singles = [reconstruction_error(ae, x[i]) for i in range(4)]
    np.testing.assert_allclose(errs1, singles, rtol=1e-12)


def test_wrong_profile_shape_rejected():
    ae = init_autoencoder(0, 16, seed=1)
    with pytest.raises(ShapeMismatchError):
        reconstruction_errors(ae, np.zeros((2, 5, 12)))
    with pytest.raises(ShapeMismatchError):
        reconstruction_errors(ae, np.zeros((2, 4, 16)))


def test_all_zero_profile_scores_finite_positive():
    ae = init_autoencoder(0, 16, seed=3)
    hyper = AutoencoderTrainConfig(
        epochs=5, learning_rate=1e-3, min_profiles=1, seed=0
    )
    trained = train_autoencoder(0, random_profiles(64, 16), hyper)
    score = reconstruction_error(trained, np.zeros((5, 16)))
    assert np.isfinite(score) and score > 0


def test_gradients_match_central_differences():
    ae = init_autoencoder(0, 8, seed=5)
    x = random_profiles(3, 8, seed=2)

    def objective(params):
        loss, _ = loss_and_grads(ae, x)
        return loss

    _, grads = loss_and_grads(ae, x)
    err = grad_check(objective, ae.params, grads, epsilon=1e-5)
    assert err < 1e-4


def test_node_only_ignores_gates():
    ae = init_autoencoder(0, 16, seed=1, node_only=True)
    x = random_profiles(3, 16, seed=4)
    y = x.copy()
    y[:, 1:, :] = 0.31  # different gates, same node row
    np.testing.assert_array_equal(
        reconstruction_errors(ae, x), reconstruction_errors(ae, y)
    )


# ---------------------------------------------------------------------------
# Training behavior
# ---------------------------------------------------------------------------


def test_insufficient_profiles_refused_with_category():
    with pytest.raises(InsufficientProfilesError, match="category 4"):
        train_autoencoder(
            4, random_profiles(10, 8), AutoencoderTrainConfig(min_profiles=200)
        )


def test_zero_epochs_flagged_untrained():
    ae = train_autoencoder(
        1,
        random_profiles(32, 8),
        AutoencoderTrainConfig(epochs=0, min_profiles=1),
    )
    assert not ae.trained


def test_memorizes_duplicated_profile():
    x = np.tile(random_profiles(1, 8, seed=9), (64, 1, 1))
    hyper = AutoencoderTrainConfig(
        epochs=300, learning_rate=1e-2, min_profiles=1, batch_size=64, seed=1
    )
    ae = train_autoencoder(0, x, hyper)
    initial = reconstruction_errors(init_autoencoder(0, 8, seed=1), x[:1])[0]
    final = reconstruction_errors(ae, x[:1])[0]
    assert final < 0.02 * initial


def test_training_reduces_loss():
    x = random_profiles(256, 8, seed=3)
    hyper = AutoencoderTrainConfig(
        epochs=30, learning_rate=1e-3, min_profiles=1, seed=2
    )
    ae = train_autoencoder(0, x, hyper)
    fresh = init_autoencoder(0, 8, seed=2)
    assert reconstruction_errors(ae, x).mean() < reconstruction_errors(fresh, x).mean()


# ---------------------------------------------------------------------------
# Separation on a real (tiny) world
# ---------------------------------------------------------------------------


@pytest.fixture(scope="module")
def tiny_fit():
    cfg = default_world_config(
        num_categories=3,
        feature_dim=8,
        seed=21,
        objects_per_scene=(2, 3),
        proposals_per_object=(1, 3),
        background_rate=1.0,
    )
    world = make_world(cfg, seed=21)
    train = generate_corpus(world, 250, seed=1)
    heldout = generate_corpus(world, 120, seed=2)
    model = train_sceme(
        train,
        world.stub,
        ScemeTrainConfig(epochs=8, attention_dim=6, appearance_dim=4, seed=4),
    ).model
    train_groups = extract_context_profiles(model, train, world.stub)
    held_groups = extract_context_profiles(model, heldout, world.stub)
    hyper = AutoencoderTrainConfig(
        epochs=40, learning_rate=1e-3, min_profiles=50, seed=6
    )
    aes = {
        cat: train_autoencoder(cat, profs, hyper)
        for cat, profs in train_groups.items()
        if len(profs) >= hyper.min_profiles
    }
    return world, aes, held_groups


def test_own_category_reconstructs_better_than_others(tiny_fit):
    _, aes, held = tiny_fit
    for cat, ae in aes.items():
        own = reconstruction_errors(ae, held[cat]).mean()
        for other, profs in held.items():
            if other == cat or len(profs) < 10:
                continue
            assert own < reconstruction_errors(ae, profs).mean(), (
                f"AE {cat} does not separate from category {other}"
            )


def test_gate_swap_raises_error(tiny_fit):
    _, aes, held = tiny_fit
    cats = sorted(aes)
    a, b = cats[0], cats[1]
    ae = aes[a]
    own = np.stack([p.to_matrix() for p in held[a][:40]])
    foreign = np.stack([p.to_matrix() for p in held[b][:40]])
    swapped = own.copy()
    swapped[:, 1:, :] = foreign[: len(own), 1:, :]
    base = reconstruction_errors(ae, own).mean()
    after = reconstruction_errors(ae, swapped).mean()
    assert after > base


# ---------------------------------------------------------------------------
# Threshold calibration
# ---------------------------------------------------------------------------


def test_threshold_boundaries():
    errors = np.array([0.1, 0.5, 0.2, 0.9, 0.3])
    assert threshold_at_fpr(errors, 0.0) == pytest.approx(0.9)
    assert threshold_at_fpr(errors, 1.0) == 0.0


def test_threshold_recount_at_five_percent():
    rng = np.random.default_rng(12)
    errors = rng.exponential(size=1000)
    t = threshold_at_fpr(errors, 0.05)
    measured = (errors > t).mean()
    assert 0.03 <= measured <= 0.07


def test_threshold_is_smallest_valid():
    errors = np.array([1.0, 2.0, 3.0, 4.0])
    t = threshold_at_fpr(errors, 0.25)  # one exceedance allowed
    assert t == pytest.approx(3.0)
    assert (errors > t).sum() == 1
    assert (errors > t - 1e-9).sum() == 2  # any smaller threshold violates


def test_calibration_reports_excluded_categories(tiny_fit):
    _, aes, held = tiny_fit
    benign = {cat: held[cat] for cat in aes}
    first = sorted(aes)[0]
    benign[first] = []
    table = calibrate_thresholds(aes, benign, target_fpr=0.1)
    assert first in table.excluded
    assert all(cat in table.thresholds for cat in aes if cat != first)
    assert all(np.isfinite(t) and t >= 0 for t in table.thresholds.values())


def test_global_mode_single_threshold(tiny_fit):
    _, aes, held = tiny_fit
    table = calibrate_thresholds(aes, held, target_fpr=0.1, mode="global")
    assert set(table.thresholds) == {-1}
    assert table.for_category(0) == table.for_category(1)


def test_threshold_table_roundtrip(tmp_path, tiny_fit):
    _, aes, held = tiny_fit
    table = calibrate_thresholds(aes, held, target_fpr=0.05)
    path = tmp_path / "thresholds.json"
    save_threshold_table(table, path)
    again = load_threshold_table(path)
    assert again.thresholds == table.thresholds
    assert again.target_fpr == table.target_fpr
    assert again.mode == table.mode
    # human-readable key/value document
    assert '"thresholds"' in path.read_text()


def test_threshold_table_rejects_invalid():
    with pytest.raises(ValueError):
        ThresholdTable(thresholds={0: float("inf")}, target_fpr=0.05)
    with pytest.raises(ValueError):
        ThresholdTable(thresholds={0: -0.1}, target_fpr=0.05)


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------


def test_autoencoder_roundtrip(tmp_path):
    hyper = AutoencoderTrainConfig(
        epochs=3, learning_rate=1e-3, min_profiles=1, seed=0
    )
    ae = train_autoencoder(2, random_profiles(64, 16), hyper)
    path = tmp_path / "ae.cgb"
    save_autoencoder(ae, path)
    again = load_autoencoder(path)
    assert again.category == 2 and again.trained and not again.node_only
    x = random_profiles(5, 16, seed=8)
    np.testing.assert_array_equal(
        reconstruction_errors(ae, x), reconstruction_errors(again, x)
    )


def test_autoencoder_load_rejects_mismatch(tmp_path):
    from contextguard.bundle import read_bundle, write_bundle

    ae = init_autoencoder(0, 16, seed=0)
    path = tmp_path / "ae.cgb"
    save_autoencoder(ae, path)
    meta, arrays = read_bundle(path)
    arrays["fc1_w"] = arrays["fc1_w"][:-1]
    bad = tmp_path / "bad.cgb"
    write_bundle(bad, meta, arrays)
    with pytest.raises(CorpusFormatError):
        load_autoencoder(bad)
