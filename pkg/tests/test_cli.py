import hashlib
import json
import os
import subprocess
import sys

import numpy as np
import pytest
from PIL import Image

from nicegan.cli import ablation_grid, main, plan_ablation
from nicegan.config import parse_dict

TINY = {"image_size": 32, "base_filters": 4, "n_res_blocks": 1, "scales_enabled": ["c0", "c1"],
        "iterations": 2, "log_every": 1, "checkpoint_every": 0, "synthetic_n": 4,
        "synthetic_n_test": 3, "seed": 1}


@pytest.fixture(scope="module")
def run(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "cfg.json"
    cfg.write_text(json.dumps(TINY))
    out = root / "run"
    assert main(["train", "--config", str(cfg), "--out", str(out)]) == 0
    return root, cfg, out, str(out / "checkpoints" / "latest")


def _digest(path):
    return hashlib.sha256(open(path, "rb").read()).hexdigest()


def test_train_layout(run):
    _, _, out, ck = run
    assert (out / "log.jsonl").exists() and (out / "config.json").exists()
    assert os.path.exists(os.path.join(ck, "manifest.json"))
    assert len((out / "log.jsonl").read_text().splitlines()) == 2


def test_translate_keeps_input_dims(run):
    root, _, _, ck = run
    src = root / "in.png"
    Image.fromarray(np.random.default_rng(0).integers(0, 256, (40, 52, 3), dtype=np.uint8)).save(src)
    before = _digest(src)
    dst = root / "o.png"
    args = ["translate", "--checkpoint", ck, "--input", str(src), "--direction", "x2y", "--output", str(dst)]
    assert main(args) == 0
    assert Image.open(dst).size == (52, 40)
    first = _digest(dst)
    assert main(args) == 0
    assert _digest(dst) == first and _digest(src) == before


def test_translate_directory(run):
    root, _, _, ck = run
    d = root / "imgs"
    d.mkdir()
    for i in range(2):
        Image.fromarray(np.full((32, 32, 3), 40 * i, np.uint8)).save(d / f"{i}.png")
    assert main(["translate", "--checkpoint", ck, "--input", str(d), "--direction", "y2x",
                 "--out", str(root / "tr")]) == 0
    assert sorted(os.listdir(root / "tr")) == ["0_y2x.png", "1_y2x.png"]


def test_evaluate_records(run):
    root, _, _, ck = run
    out = root / "eval"
    assert main(["evaluate", "--checkpoint", ck, "--metrics", "kid,fid", "--extractor", "random_conv",
                 "--out", str(out)]) == 0
    recs = [json.loads(line) for line in (out / "metrics.jsonl").read_text().splitlines()]
    assert len(recs) == 4
    for direction in ("x2y", "y2x"):
        assert sorted(r["name"] for r in recs if r["direction"] == direction) == ["fid", "kid"]
    assert all(r["extractor_id"].startswith("random_conv") and r["iter"] == 2 for r in recs)


def test_evaluate_on_dataset_root(run):
    from nicegan.data import make_synthetic_domains, SyntheticSpec, write_dataset
    root, _, _, ck = run
    data = root / "data"
    dx, dy = make_synthetic_domains(SyntheticSpec(n=3, size=32), 4)
    write_dataset(str(data), "test", dx, dy)
    assert main(["evaluate", "--checkpoint", ck, "--dataset", str(data), "--metrics", "mmd,cycle",
                 "--out", str(root / "eval2")]) == 0
    names = [json.loads(line)["name"] for line in (root / "eval2" / "metrics.jsonl").read_text().splitlines()]
    assert sorted(names) == ["cycle_l1", "cycle_l1", "latent_mmd"]


def test_interpolate_and_latents(run):
    root, _, _, ck = run
    a, b = root / "a.png", root / "b.png"
    Image.fromarray(np.zeros((32, 32, 3), np.uint8)).save(a)
    Image.fromarray(np.full((32, 32, 3), 200, np.uint8)).save(b)
    assert main(["interpolate", "--checkpoint", ck, "--input-x", str(a), "--input-y", str(b),
                 "--ts", "0,0.5,1", "--out", str(root / "interp")]) == 0
    w, h = Image.open(root / "interp" / "interpolation.png").size
    assert (w, h) == (5 * 34 - 2, 2 * 34 - 2)
    assert main(["latents", "--checkpoint", ck, "--out", str(root / "lat")]) == 0
    rows = (root / "lat" / "latents.csv").read_text().splitlines()
    assert len(rows) == 1 + 2 * TINY["synthetic_n_test"]


def test_plot_overlay(run, tmp_path):
    _, _, out, _ = run
    log = str(out / "log.jsonl")
    assert main(["plot", "--log", log, "--log", log, "--log", log, "--labels", "NICE,JOINT,GEN_COUPLED",
                 "--out", str(tmp_path)]) == 0
    assert len([f for f in os.listdir(tmp_path) if f.startswith("overlay_")]) == 10


def test_exit_codes(run, tmp_path, capsys):
    root, cfg, _, ck = run
    assert main([]) == 2
    assert main(["frobnicate"]) == 2
    assert main(["evaluate", "--checkpoint", ck, "--metrics", "bogus", "--out", str(tmp_path)]) == 2
    bad = tmp_path / "bad.json"
    bad.write_text('{"lambda_cycle": -1}')
    assert main(["train", "--config", str(bad), "--out", str(tmp_path / "x")]) == 3
    assert "lambda_cycle" in capsys.readouterr().err
    assert main(["train", "--config", str(cfg), "--set", "nope=1", "--out", str(tmp_path / "x")]) == 3
    assert main(["translate", "--checkpoint", str(tmp_path / "missing"), "--input", str(cfg)]) == 4
    assert main(["evaluate", "--checkpoint", ck, "--extractor", "external_adapter",
                 "--out", str(tmp_path)]) == 4
    assert "CapabilityError" in capsys.readouterr().err
    with pytest.warns(UserWarning, match="config hash"):
        assert main(["translate", "--checkpoint", ck, "--set", "lr=0.5", "--input", str(cfg)]) == 3


def test_ablation_plan(tmp_path):
    base = parse_dict({**TINY, "seed": 10})
    plan = plan_ablation(base, str(tmp_path))
    names = [p[1] for p in plan]
    assert names == [n for n, _ in ablation_grid(base)]
    by_name = {p[1]: p for p in plan}
    assert by_name["no_ra"][2].seed == 10 + by_name["no_ra"][0]
    assert by_name["scales_c0_c1"][2] is None  # already the base scales
    assert by_name["scales_c0_c2"][2] is None  # c2 needs 128px images
    assert by_name["shared_plus"][2].shared_depth == 4


def test_ablate_writes_run_dirs(run, tmp_path):
    _, cfg, _, _ = run
    assert main(["ablate", "--config", str(cfg), "--set", "iterations=1", "--cells", "no_ra,variant_joint",
                 "--no-eval", "--out", str(tmp_path)]) == 0
    for cell in ("no_ra", "variant_joint"):
        snap = json.loads((tmp_path / cell / "config.json").read_text())
        assert snap["out_dir"] == str(tmp_path / cell)
        assert (tmp_path / cell / "log.jsonl").exists()
    summary = [json.loads(line) for line in (tmp_path / "ablation.jsonl").read_text().splitlines()]
    assert [s["cell"] for s in summary] == ["no_ra", "variant_joint"]
    assert main(["ablate", "--config", str(cfg), "--cells", "nonsense", "--out", str(tmp_path)]) == 2


def test_console_entry_point(tmp_path):
    env = dict(os.environ, NICEGAN_DETERMINISTIC="1")
    proc = subprocess.run([sys.executable, "-m", "nicegan", "ablate", "--list", "--out", str(tmp_path)],
                          capture_output=True, text=True, env=env)
    assert proc.returncode == 0 and "variant_gen_coupled" in proc.stdout
