import numpy as np
import pytest

from attnalign.config import ModelConfig
from attnalign.errors import ConfigurationError
from attnalign.synthetic import (
    PALETTE,
    VOCAB,
    SceneScript,
    ShapeSpec,
    boxes_adjacent,
    label_success,
    make_dataset,
    make_script,
    render,
    verb_outcome,
)

CFG = ModelConfig(n_layers=2, n_heads=2, d_model=16, latent_frames=4, latent_height=8,
                  latent_width=8, text_len=16, timesteps=4, seed=0)


def _static_script():
    centers = np.tile(np.array([16.0, 10.0]), (CFG.pixel_frames, 1))
    obj_centers = np.tile(np.array([16.0, 24.0]), (CFG.pixel_frames, 1))
    return SceneScript(
        clip_id="static", verb="approach", k_sub=1, k_obj=2, contact_frame=5,
        seed=0, succeed=False,
        shapes=[
            ShapeSpec(1, "square", "red", 6, centers),
            ShapeSpec(2, "circle", "blue", 6, obj_centers),
        ],
    )


class TestRender:
    def test_static_square_mask_constant(self):
        video, manifest = render(_static_script(), CFG)
        track = manifest.track(1)
        for f in range(1, CFG.pixel_frames):
            assert np.array_equal(track.masks[f], track.masks[0])

    def test_masks_match_rendered_color_layers(self):
        video, manifest = render(_static_script(), CFG)
        for shape_id, color in ((1, "red"), (2, "blue")):
            rgb = np.asarray(PALETTE[color], dtype=np.float64) / 255.0
            mask = manifest.track(shape_id).masks
            for f in (0, CFG.pixel_frames - 1):
                covered = mask[f] == 1
                assert covered.any()
                pix = video[f][:, covered]
                assert np.allclose(pix, rgb[:, None])

    def test_push_script_adjacent_from_contact(self):
        script = make_script("p", seed=5, config=CFG, verb="push", succeed=True)
        _, manifest = render(script, CFG)
        sub, obj = manifest.track(1).masks, manifest.track(2).masks
        for f in range(script.contact_frame, CFG.pixel_frames):
            assert boxes_adjacent(sub[f], obj[f]), f

    def test_same_seed_bit_identical(self):
        a_video, a_manifest = render(make_script("x", 11, CFG), CFG)
        b_video, b_manifest = render(make_script("x", 11, CFG), CFG)
        assert np.array_equal(a_video, b_video)
        for ta, tb in zip(a_manifest.tracks, b_manifest.tracks):
            assert np.array_equal(ta.masks, tb.masks)

    def test_shapes_stay_in_frame(self):
        for seed in range(8):
            script = make_script(f"s{seed}", seed=seed, config=CFG)
            _, manifest = render(script, CFG)
            for track in manifest.tracks:
                for f in range(CFG.pixel_frames):
                    assert track.masks[f].sum() > 0, (seed, f)
                    ys, xs = track.masks[f].nonzero()
                    assert ys.min() >= 0 and ys.max() < CFG.pixel_height
                    assert xs.min() >= 0 and xs.max() < CFG.pixel_width


class TestLabels:
    def test_intended_outcomes_match_oracle(self):
        for seed in range(16):
            for verb in ("push", "lift", "approach", "hand-over"):
                for succeed in (True, False):
                    script = make_script("c", seed=100 + seed, config=CFG,
                                         verb=verb, succeed=succeed)
                    video, _ = render(script, CFG)
                    assert label_success(script, video) == succeed, (verb, seed, succeed)

    def test_label_is_pure_function(self):
        script = make_script("c", seed=3, config=CFG, verb="lift", succeed=True)
        video, _ = render(script, CFG)
        assert label_success(script, video) == label_success(script, video)

    def test_unchanged_object_is_failure(self):
        script = _static_script()
        script.verb = "push"
        video, _ = render(script, CFG)
        assert not label_success(script, video)

    def test_approach_halved_distance_is_success(self):
        script = make_script("c", seed=4, config=CFG, verb="approach", succeed=True)
        _, manifest = render(script, CFG)
        assert verb_outcome("approach", manifest.track(1).masks,
                            manifest.track(2).masks, 6)


class TestManifestExtras:
    def test_token_specs_are_valid(self):
        for _, _, manifest in make_dataset(6, seed=33, config=CFG):
            extras = manifest.extras
            ids = extras["text_ids"]
            assert len(ids) == CFG.text_len
            assert all(0 <= i < len(VOCAB) for i in ids)
            specs = extras["token_specs"]
            for role in ("sub", "obj", "verb"):
                assert specs[role], role
                assert all(0 <= p < CFG.text_len for p in specs[role])
            # role tokens are not padding
            for role in ("sub", "obj", "verb"):
                assert all(ids[p] != 0 for p in specs[role])

    def test_balanced_dataset_has_both_labels(self):
        labels = [m.extras["label_success"] for _, _, m in make_dataset(8, 50, CFG)]
        assert any(labels) and not all(labels)

    def test_prompt_too_long_rejected(self):
        tight = ModelConfig(n_layers=2, n_heads=2, d_model=16, latent_frames=4,
                            latent_height=8, latent_width=8, text_len=4, timesteps=4, seed=0)
        with pytest.raises(ConfigurationError):
            render(make_script("c", seed=1, config=tight, verb="push", succeed=True), tight)
