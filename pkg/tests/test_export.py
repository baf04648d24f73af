import numpy as np
import pytest

from anca.checkpoint import Checkpoint
from anca.config import TrainConfig
from anca.data import denormalize, preprocess
from anca.errors import ConfigError
from anca.export import export_attention, export_trajectory, mosaic, quantize_gate
from anca.imageio import parse_netpbm, read_image
from anca.optim import init_params
from anca.rng import Rng


def fresh_checkpoint(config, classes=("bar", "disk"), mean=(0.5, 0.5, 0.5), std=(0.25, 0.25, 0.25)):
    params = init_params(config.architecture(len(classes)), Rng(config.seed))
    return Checkpoint(config, params, list(classes), mean, std, 0, "", 0, 0, None, [])


@pytest.fixture(scope="module")
def image(small_toy_root):
    return sorted((small_toy_root / "disk").iterdir())[0]


def test_quantize_gate_rounding():
    assert quantize_gate(np.array([0.0, 0.5, 1.0, 0.998, 0.001])).tolist() == [0, 128, 255, 254, 0]
    assert quantize_gate(np.array([-0.1, 1.1])).tolist() == [0, 255]


def test_mosaic_layout():
    tiles = np.stack([np.full((2, 3), i + 1, np.uint8) for i in range(5)], axis=-1)
    m = mosaic(tiles)
    assert m.shape == (2 * 2 + 1, 3 * 3 + 2)  # 2 rows by 3 columns, 1-pixel gaps
    assert m[0, 0] == 1 and m[0, 4] == 2 and m[3, 0] == 4 and m[2, 0] == 0


def test_zero_theta_gives_uniform_gate(tiny_config, image, tmp_path):
    ck = fresh_checkpoint(tiny_config)
    res = export_attention(ck, image, tmp_path / "gate.pgm")
    written = parse_netpbm((tmp_path / "gate.pgm").read_bytes())
    assert written.shape == (12, 12) and (written == 128).all()
    assert np.array_equal(written, res.gate)


def test_single_hot_theta_pixel(tiny_config, image, tmp_path):
    ck = fresh_checkpoint(tiny_config)
    ck.params["pool.theta"][:] = -8.0
    ck.params["pool.theta"][3, 7] = 8.0
    res = export_attention(ck, image, tmp_path / "g.pgm")
    assert res.gate[3, 7] >= 254
    others = np.delete(res.gate.ravel(), 3 * 12 + 7)
    assert others.max() <= 1


def test_companion_files(tiny_run, image, tmp_path):
    _, out = tiny_run
    res = export_attention(out / "final.anca", image, tmp_path / "sub" / "att.pgm")
    assert res.paths["selected"].name == "att_selected.pgm"
    sel = parse_netpbm(res.paths["selected"].read_bytes())
    assert set(np.unique(sel)) <= {0, 255}
    # k = round(0.25 * 144) = 36 cells per channel
    assert res.selected.sum(axis=(0, 1)).tolist() == [36] * 4
    emb = [float(x) for x in res.paths["embedding"].read_text().split()]
    assert emb == res.embedding.tolist()


def test_max_mode_has_no_gate(tiny_config, image, tmp_path):
    ck = fresh_checkpoint(tiny_config.replace(pool_mode="max"))
    with pytest.raises(ConfigError):
        export_attention(ck, image, tmp_path / "g.pgm")


def test_trajectory_frames(tiny_run, image, tmp_path, tiny_config):
    _, out = tiny_run
    ck = Checkpoint.load(out / "final.anca")
    paths = export_trajectory(ck, image, tmp_path)
    assert [p.name for p in paths] == [f"frame_{t:03d}.ppm" for t in range(tiny_config.steps + 1)]
    first = read_image(paths[0])
    expect = denormalize(preprocess(read_image(image), 12, ck.mean, ck.std), ck.mean, ck.std)
    assert np.abs(first.astype(int) - expect.astype(int)).max() <= 1


def test_trajectory_static_without_update(tmp_path, image):
    config = TrainConfig(input_size=12, channels=4, hidden=4, steps=5)
    ck = fresh_checkpoint(config)  # w2 and b2 start at zero, so no cell ever changes
    frames = [p.read_bytes() for p in export_trajectory(ck, image, tmp_path)]
    assert len(frames) == 6 and all(f == frames[0] for f in frames)
