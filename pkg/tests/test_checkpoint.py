import json

import numpy as np
import pytest

from gana_fkgc.checkpoint import (Checkpoint, CheckpointError, IntegrityError, VersionMismatchError,
                                  load_checkpoint, load_embeddings, read_tensor_file, save_checkpoint,
                                  save_embeddings, write_tensor_file)
from gana_fkgc.kg_data import EmbeddingTable
from gana_fkgc.training import Trainer

from conftest import tiny_episodes


def sample_ckpt():
    rng = np.random.default_rng(0)
    return Checkpoint({"d": 3}, {"w": rng.normal(size=(2, 3)), "b": np.array(0.25), "v": rng.normal(size=4)},
                      {"w/exp_avg": rng.normal(size=(2, 3))}, step=7, best_val_mrr=0.5,
                      rng_state={"state": 1}, extra={"note": "x"})


def test_round_trip_bit_exact(tmp_path):
    ckpt = sample_ckpt()
    save_checkpoint(ckpt, tmp_path / "c")
    back = load_checkpoint(tmp_path / "c")
    for k, v in ckpt.tensors.items():
        assert back.tensors[k].shape == v.shape
        assert back.tensors[k].tobytes() == v.tobytes()
    assert back.optimizer["w/exp_avg"].tobytes() == ckpt.optimizer["w/exp_avg"].tobytes()
    assert (back.step, back.best_val_mrr, back.rng_state, back.extra) == (7, 0.5, {"state": 1}, {"note": "x"})


def test_version_mismatch(tmp_path):
    save_checkpoint(sample_ckpt(), tmp_path / "c")
    mpath = tmp_path / "c" / "manifest.json"
    manifest = json.loads(mpath.read_text())
    manifest["version"] = "gana-fkgc-ckpt/999"
    mpath.write_text(json.dumps(manifest))
    with pytest.raises(VersionMismatchError):
        load_checkpoint(tmp_path / "c")


def test_corrupted_blob(tmp_path):
    save_checkpoint(sample_ckpt(), tmp_path / "c")
    blob = tmp_path / "c" / "tensors.bin"
    data = bytearray(blob.read_bytes())
    data[3] ^= 0xFF
    blob.write_bytes(bytes(data))
    with pytest.raises(IntegrityError):
        load_checkpoint(tmp_path / "c")


def test_truncated_blob(tmp_path):
    save_checkpoint(sample_ckpt(), tmp_path / "c")
    blob = tmp_path / "c" / "tensors.bin"
    blob.write_bytes(blob.read_bytes()[:-8])
    with pytest.raises(IntegrityError):
        load_checkpoint(tmp_path / "c")


def test_missing_files(tmp_path):
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "nothing")


def test_blob_is_little_endian_f8(tmp_path):
    write_tensor_file(tmp_path / "t", {"a": np.array([1.5, -2.0])}, {"version": "gana-fkgc-ckpt/1"})
    raw = (tmp_path / "t" / "tensors.bin").read_bytes()
    assert raw == np.array([1.5, -2.0], dtype="<f8").tobytes()
    manifest, tensors = read_tensor_file(tmp_path / "t")
    assert manifest["tensors"][0] == {"name": "a", "shape": [2], "offset": 0, "nbytes": 16}


def test_embedding_files(tmp_path):
    table = EmbeddingTable(np.arange(6.0).reshape(3, 2), np.ones((2, 2)))
    save_embeddings(table, tmp_path / "e")
    back = load_embeddings(tmp_path / "e")
    assert np.array_equal(back.entity_vectors, table.entity_vectors)
    with pytest.raises(CheckpointError):
        save_checkpoint(sample_ckpt(), tmp_path / "c")
        load_embeddings(tmp_path / "c")


def test_resume_matches_uninterrupted(tiny_setup, tmp_path):
    graph, split, cfg, emb = tiny_setup
    cfg = cfg.replace(optimizer="adam", outer_lr=0.01)
    straight = Trainer(graph, split, cfg, emb)
    for _ in range(3):
        straight.step()
    save_checkpoint(straight.checkpoint(), tmp_path / "mid")
    expected = straight.step()["loss"]

    resumed = Trainer(graph, split, cfg, emb, checkpoint=load_checkpoint(tmp_path / "mid"))
    assert resumed.step()["loss"] == expected
    for (k, a), (_, b) in zip(straight.model.named_parameters(), resumed.model.named_parameters()):
        assert a.detach().numpy().tobytes() == b.detach().numpy().tobytes(), k


def test_restore_rejects_shape_mismatch(tiny_setup):
    graph, split, cfg, emb = tiny_setup
    trainer = Trainer(graph, split, cfg, emb)
    ckpt = trainer.checkpoint()
    ckpt.tensors["attn.W3"] = np.zeros((1, 1))
    from gana_fkgc.training import TrainingError
    with pytest.raises(TrainingError):
        Trainer(graph, split, cfg, emb, checkpoint=ckpt)


def test_episode_stream_resumes(tiny_setup):
    graph, split, cfg, emb = tiny_setup
    a = Trainer(graph, split, cfg, emb)
    a.step()
    b = Trainer(graph, split, cfg, emb, checkpoint=a.checkpoint())
    assert a.sample_batch() == b.sample_batch()
    assert tiny_episodes(split, cfg) == tiny_episodes(split, cfg)
