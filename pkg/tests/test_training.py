import numpy as np
import pytest
import torch

from attnalign.config import ModelConfig
from attnalign.errors import DataError
from attnalign.losses import CausalDecoder, LossWeights, select_trainable
from attnalign.model import FixedPixelCoder, NoiseSchedule, ToyDiT
from attnalign.pipeline import prepare_example
from attnalign.synthetic import make_dataset
from attnalign.training import (
    TrainSettings,
    load_checkpoint,
    save_checkpoint,
    train,
    train_step,
    write_loss_ledger,
)

CFG = ModelConfig(n_layers=2, n_heads=2, d_model=16, latent_frames=3, latent_height=8,
                  latent_width=8, text_len=16, timesteps=4, seed=3)


def _examples(config, n=2, seed=21):
    coder = FixedPixelCoder(config)
    data = make_dataset(n, seed=seed, config=config)
    return [prepare_example(m, v, config, coder) for _, v, m in data]


def _settings(**kw):
    base = dict(steps=5, lr=1e-3, seed=7, grounding_layers=(0,), propagation_layers=(1,))
    base.update(kw)
    return TrainSettings(**base)


class TestTrainLoop:
    def test_zero_steps_checkpoint_equals_initialization(self, tmp_path):
        model = ToyDiT(CFG)
        dec = CausalDecoder(CFG)
        init = {n: p.detach().clone() for n, p in model.named_parameters()}
        result = train(model, dec, _examples(CFG), _settings(steps=0))
        assert result.rows == []
        path = save_checkpoint(tmp_path / "ck.bin", model, dec)
        fresh_model, fresh_dec = ToyDiT(CFG), CausalDecoder(CFG)
        load_checkpoint(path, fresh_model, fresh_dec)
        for name, p in fresh_model.named_parameters():
            assert torch.equal(p.detach(), init[name].to(torch.float32).to(p.dtype))

    def test_same_seed_identical_loss_curves(self):
        curves = []
        for _ in range(2):
            model = ToyDiT(CFG)
            dec = CausalDecoder(CFG)
            result = train(model, dec, _examples(CFG), _settings(steps=6))
            curves.append(result.curve("total"))
        assert curves[0] == curves[1]

    def test_ledger_csv_schema(self, tmp_path):
        model = ToyDiT(CFG)
        dec = CausalDecoder(CFG)
        result = train(model, dec, _examples(CFG), _settings(steps=3))
        path = write_loss_ledger(result, tmp_path / "ledger.csv")
        lines = path.read_text().strip().splitlines()
        assert lines[0] == "step,l_dm,l_sga,l_spa,total"
        assert len(lines) == 4

    def test_empty_dataset_rejected(self):
        with pytest.raises(DataError):
            train(ToyDiT(CFG), CausalDecoder(CFG), [], _settings())

    def test_short_run_reduces_alignment_loss(self):
        cfg = ModelConfig(n_layers=2, n_heads=2, d_model=16, latent_frames=3,
                          latent_height=8, latent_width=8, text_len=16, timesteps=4,
                          seed=3, dtype="float32")
        model = ToyDiT(cfg)
        dec = CausalDecoder(cfg)
        result = train(model, dec, _examples(cfg), _settings(steps=40, lr=3e-3))
        first = np.mean(result.curve("l_sga")[:5])
        last = np.mean(result.curve("l_sga")[-5:])
        assert last < first


class TestTrainStepGradients:
    def test_total_gradient_matches_finite_differences(self):
        model = ToyDiT(CFG)
        dec = CausalDecoder(CFG)
        examples = _examples(CFG, n=1)
        settings = _settings()
        trainable = select_trainable(model, dec, [0], [1])
        schedule = NoiseSchedule(CFG)
        gen = torch.Generator().manual_seed(31)
        noise = torch.randn(examples[0].z0.shape, generator=gen, dtype=torch.float64)

        parts = train_step(model, dec, schedule, examples[0], settings, 2, noise)
        parts["total"].backward()

        def eval_total():
            fresh = train_step(model, dec, schedule, examples[0], settings, 2, noise)
            return float(fresh["total"].detach())

        rng = np.random.default_rng(32)
        h = 1e-5
        for _ in range(5):
            p = trainable[int(rng.integers(len(trainable)))]
            idx = int(rng.integers(p.numel()))
            analytic = float(p.grad.reshape(-1)[idx])
            with torch.no_grad():
                flat = p.reshape(-1)
                original = float(flat[idx])
                flat[idx] = original + h
                fp = eval_total()
                flat[idx] = original - h
                fm = eval_total()
                flat[idx] = original
            fd = (fp - fm) / (2 * h)
            # denominator floored at 1e-5: below that, central differences at
            # h=1e-5 sit inside their own rounding noise
            rel = abs(analytic - fd) / max(abs(analytic), abs(fd), 1e-5)
            assert rel < 1e-4, (analytic, fd)


class TestCheckpoint:
    def test_roundtrip_preserves_f32_values(self, tmp_path):
        model = ToyDiT(CFG)
        dec = CausalDecoder(CFG)
        train(model, dec, _examples(CFG), _settings(steps=2))
        path = save_checkpoint(tmp_path / "ck.bin", model, dec, extra={"note": 1})
        m2, d2 = ToyDiT(CFG), CausalDecoder(CFG)
        header = load_checkpoint(path, m2, d2)
        assert header["extra"] == {"note": 1}
        assert header["config"] == CFG.to_dict()
        for (n1, p1), (_, p2) in zip(model.named_parameters(), m2.named_parameters()):
            assert torch.equal(p1.detach().to(torch.float32), p2.detach().to(torch.float32)), n1

    def test_config_mismatch_rejected(self, tmp_path):
        model = ToyDiT(CFG)
        path = save_checkpoint(tmp_path / "ck.bin", model)
        other = ToyDiT(ModelConfig(n_layers=2, n_heads=2, d_model=16, latent_frames=3,
                                   latent_height=8, latent_width=8, text_len=16,
                                   timesteps=4, seed=4))
        with pytest.raises(DataError):
            load_checkpoint(path, other)

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "junk.bin"
        path.write_bytes(b"NOTACKPT" + b"\x00" * 16)
        with pytest.raises(DataError):
            load_checkpoint(path, ToyDiT(CFG))
