import numpy as np
import pytest
import torch

from attnalign.config import ModelConfig
from attnalign.errors import EmptyQueryError
from attnalign.grounding import aas
from attnalign.masks import LatentMask
from attnalign.model import AttentionRecord
from attnalign.propagation import PropagationMap, QuerySet, propagation_map, query_set, query_union

CFG = ModelConfig(n_layers=2, n_heads=2, d_model=16, latent_frames=2, latent_height=4,
                  latent_width=4, text_len=8, timesteps=4, seed=0)


def _random_record(config, seed=0):
    gen = torch.Generator().manual_seed(seed)
    logits = torch.randn(config.n_heads, config.seq_len, config.seq_len,
                         generator=gen, dtype=torch.float64)
    return AttentionRecord(layer=0, head_maps=torch.softmax(logits, dim=-1))


class TestQuerySet:
    def test_single_cell(self):
        mask = np.zeros((4, 4), dtype=np.uint8)
        mask[0, 0] = 1
        assert query_set(LatentMask(mask), "sub").locations == ((0, 0),)

    def test_union(self):
        sub = QuerySet("sub", ((0, 0),))
        obj = QuerySet("obj", ((0, 1),))
        assert query_union(sub, obj).locations == ((0, 0), (0, 1))

    def test_full_mask_exhaustive(self):
        mask = np.ones((2, 2), dtype=np.uint8)
        assert len(query_set(LatentMask(mask), "verb").locations) == 4

    def test_empty_mask_rejected(self):
        with pytest.raises(EmptyQueryError):
            query_set(LatentMask(np.zeros((4, 4), dtype=np.uint8)), "sub")


class TestPropagationMap:
    def test_identity_attention_gives_one_hot(self):
        cfg = ModelConfig(n_layers=1, n_heads=1, d_model=8, latent_frames=2,
                          latent_height=2, latent_width=2, text_len=4, timesteps=4, seed=0)
        maps = torch.zeros(1, cfg.seq_len, cfg.seq_len, dtype=torch.float64)
        maps[0] = torch.eye(cfg.seq_len, dtype=torch.float64)
        record = AttentionRecord(layer=0, head_maps=maps)
        queries = QuerySet("sub", ((1, 0),))  # token index 1*W + 0 = 2 on frame 0
        pmap = propagation_map(record, queries, cfg)
        flat = pmap.values.reshape(-1)
        assert float(flat[2]) == 1.0
        assert float(flat.sum()) == 1.0

    def test_duplicate_queries_are_set_semantics(self):
        record = _random_record(CFG, seed=1)
        once = propagation_map(record, QuerySet("sub", ((1, 2),)), CFG)
        twice = propagation_map(record, QuerySet("sub", ((1, 2), (1, 2))), CFG)
        assert torch.equal(once.values, twice.values)

    def test_matches_loop_oracle(self):
        record = _random_record(CFG, seed=2)
        queries = QuerySet("obj", ((0, 0), (1, 3), (3, 1)))
        pmap = propagation_map(record, queries, CFG)
        n_v = CFG.n_video_tokens
        flat = pmap.values.reshape(-1)
        for key in range(n_v):
            acc = 0.0
            for (h, w) in queries.locations:
                q = h * CFG.latent_width + w
                for head in range(CFG.n_heads):
                    acc += float(record.head_maps[head, q, key])
            assert float(flat[key]) == pytest.approx(acc / 3, rel=1e-12)

    def test_query_permutation_invariance(self):
        record = _random_record(CFG, seed=3)
        a = propagation_map(record, QuerySet("sub", ((0, 1), (2, 2))), CFG)
        b = propagation_map(record, QuerySet("sub", ((2, 2), (0, 1))), CFG)
        assert torch.equal(a.values, b.values)

    def test_block_diagonal_v2v_has_no_cross_frame_mass(self):
        cfg = CFG
        n_v = cfg.n_video_tokens
        cells = cfg.latent_height * cfg.latent_width
        maps = torch.zeros(cfg.n_heads, cfg.seq_len, cfg.seq_len, dtype=torch.float64)
        gen = torch.Generator().manual_seed(4)
        for f in range(cfg.latent_frames):  # per-frame blocks only
            sl = slice(f * cells, (f + 1) * cells)
            block = torch.rand(cfg.n_heads, cells, cells, generator=gen, dtype=torch.float64)
            maps[:, sl, sl] = block / block.sum(dim=-1, keepdim=True)
        record = AttentionRecord(layer=0, head_maps=maps)
        queries = QuerySet("sub", ((0, 0), (1, 1)))
        pmap = propagation_map(record, queries, cfg)
        later_frames = np.zeros((cfg.latent_frames, cfg.latent_height, cfg.latent_width),
                                dtype=np.uint8)
        later_frames[1:] = 1
        assert aas(pmap, LatentMask(later_frames)) == 0.0
