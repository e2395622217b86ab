"""End-to-end acceptance checks, one test per criterion.

Each test records a one-line PASS/FAIL verdict; the lines are printed in the
"acceptance criteria" section of the pytest terminal summary. Run just these
with ``pytest tests/test_acceptance.py -v``.
"""
import math
import re
import time

import numpy as np
import pytest
from threadpoolctl import threadpool_limits

from conftest import ACCEPTANCE_LINES, CONFIGS
from mlip import align as A, cli, spectral as S
from mlip.bench import bench, observed_token_counts, without_merging
from mlip.config import load_config
from mlip.evaluate import evaluate
from mlip.merge import merge_count
from mlip.model import init_model
from mlip.tensor import Tensor
from mlip.train import train

SHORT_RUN = """\
preset = tiny
data.n = 64
train.epochs = 2
train.warmup_steps = 1
"""


def verdict(number: int, ok: bool, detail: str):
    line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES[number] = line
    print(line)
    return ok


def _circular_conv(k, x):
    h, w, _ = x.shape
    out = np.zeros_like(x)
    for p in range(h):
        for q in range(w):
            for i in range(h):
                for j in range(w):
                    out[p, q] += k[i, j] * x[(p - i) % h, (q - j) % w]
    return out


# -------------------------------------------------------------- 1. FFT oracle
def test_01_fft_matches_oracle():
    r = np.random.default_rng(101)
    start = time.perf_counter()
    worst = 0.0
    for _ in range(50):
        h, w = (int(2 ** r.integers(0, 5)) for _ in range(2))
        x = r.standard_normal((h, w, int(r.integers(1, 5))))
        worst = max(worst, float(np.abs(S.dft_2d(x).complex() - S.brute_dft_oracle(x).complex()).max()))
    seconds = time.perf_counter() - start
    ok = verdict(1, worst <= 1e-5 and seconds < 5, f"max|d|={worst:.2e} (<=1e-5) in {seconds:.2f}s (<5s)")
    assert ok


# ------------------------------------------------------------ 2. round trip
def test_02_lossless_round_trip():
    r = np.random.default_rng(102)
    worst = 0.0
    for _ in range(50):
        h, w = int(2 ** r.integers(0, 5)), int(2 ** r.integers(1, 5))  # half spectrum needs even w
        y = r.standard_normal((h, w, int(r.integers(1, 5))))
        back = S.idft_2d_real(S.half_spectrum(S.dft_2d(y)))
        worst = max(worst, float(np.abs(back - y).max()))
    assert verdict(2, worst <= 1e-5, f"max|d|={worst:.2e} (<=1e-5) over 50 grids")


# ------------------------------------------------------ 3. convolution theorem
def test_03_convolution_theorem():
    r = np.random.default_rng(103)
    worst = 0.0
    for _ in range(5):
        k, x = r.standard_normal((8, 8, 2)), r.standard_normal((8, 8, 2))
        spectral = S.ifft2(S.dft_2d(k).complex() * S.dft_2d(x).complex()).real
        worst = max(worst, float(np.abs(spectral - _circular_conv(k, x)).max()))
    assert verdict(3, worst <= 1e-4, f"max|d|={worst:.2e} (<=1e-4) on 8x8 grids")


# ------------------------------------------------------------- 4. KM optimum
def test_04_km_matches_exhaustive_search():
    r = np.random.default_rng(104)
    start = time.perf_counter()
    mismatches = 0
    for _ in range(200):
        lb, lc = (int(v) for v in r.integers(1, 8, 2))
        b, c = r.standard_normal((lb, 6)), r.standard_normal((lc, 6))
        w = A.build_weight_matrix(Tensor(b), Tensor(c)).values.data.astype(np.float64)
        fast, slow = A.km_match(w), A.brute_force_assignment(w)
        cols = np.arange(len(w))
        exact = math.fsum(w[fast.match, cols]) == math.fsum(w[slow.match, cols])
        mismatches += not exact or sorted(fast.match.tolist()) != list(range(len(w)))
    seconds = time.perf_counter() - start
    ok = verdict(4, mismatches == 0 and seconds < 10,
                 f"{200 - mismatches}/200 exact optima, l*<=7, {seconds:.2f}s (<10s)")
    assert ok


# ------------------------------------------------------- 5. scale invariance
def test_05_positive_scaling_invariance():
    r = np.random.default_rng(105)
    changed = 0
    for i in range(50):
        n = int(r.integers(2, 8))
        w = r.integers(-2, 3, (n, n)).astype(float) if i % 2 else r.standard_normal((n, n))
        base = A.km_match(w).match.tolist()
        for c in np.exp(r.uniform(-12, 12, 6)):
            changed += A.km_match(w * c).match.tolist() != base
    assert verdict(5, changed == 0, f"{changed} changed matchings over 50 instances x 6 scales")


# ------------------------------------------------------- 6. merge conservation
def test_06_merge_conservation_during_training(tiny_run):
    _, result, _, stats = tiny_run
    assert len(stats) == 2 * len(result.metrics)
    drops = all(s.removed == s.expected_removed > 0 for s in stats)
    sizes = max(s.size_drift for s in stats)
    centroid = max(s.centroid_drift for s in stats)
    expected = [64 - merge_count(64, 0.5), 32 - merge_count(32, 0.5)]
    counts = all(m.tokens == expected for m in result.metrics)
    ok = drops and counts and sizes <= 1e-4 and centroid <= 1e-3
    detail = (f"{len(stats)} merges, drop exact={drops and counts}, "
              f"size drift {sizes:.1e} (<=1e-4), centroid drift {centroid:.1e} (<=1e-3)")
    assert verdict(6, ok, detail)


# --------------------------------------------------------- 7. gradient check
def test_07_gradcheck_cli_three_seeds(capsys):
    start = time.perf_counter()
    codes, worst = [], 0.0
    for seed in range(3):
        codes.append(cli.main(["gradcheck", "--config", str(CONFIGS / "gradcheck.cfg"), "--seed", str(seed)]))
        out = capsys.readouterr().out
        worst = max(worst, float(re.search(r"max relative error ([0-9.eE+-]+)", out).group(1)))
    seconds = time.perf_counter() - start
    params = init_model(load_config(CONFIGS / "gradcheck.cfg").model, 0).num_parameters()
    ok = codes == [0, 0, 0] and worst <= 1e-3 and seconds < 300 and params <= 5000
    assert verdict(7, ok, f"exit codes {codes}, {params} params, max rel err {worst:.2e}, {seconds:.1f}s (<300s)")


# ------------------------------------------------------------- 8. loss values
def test_08_loss_values():
    e = np.tile(np.array([[1.0, 0, 0]]), (4, 1))
    nce = float(A.info_nce(Tensor(e), Tensor(e), 0.07).data)
    toks = np.eye(4)[None, :3]
    o2m = float(A.one_to_many_align(Tensor(toks), Tensor(toks)).data)
    total = A.mlip_total_loss(1.0, 1.0, 1.0, 1.0, (0.15, 0.65, 0.1, 0.1))
    ok = abs(nce - math.log(4)) <= 1e-5 and abs(o2m + 1) <= 1e-5 and total == 1.0
    assert verdict(8, ok, f"info_nce={nce:.7f} (ln4), one_to_many={o2m:.7f}, total={total!r}")


# --------------------------------------------------------- 9. end to end run
def test_09_end_to_end_learning(tiny_run, tiny_data):
    _, result, seconds, _ = tiny_run
    pairs = tiny_data[1]
    first, last = result.epoch_means[0], result.epoch_means[-1]
    r1 = evaluate(result.state, pairs).text_to_image[1]
    with threadpool_limits(limits=1):
        chance = max(evaluate(init_model(result.state.config, s), pairs).text_to_image[1] for s in (0, 1, 2))
    ok = last <= 0.5 * first and r1 >= 0.9 and seconds <= 900 and chance < 0.05
    detail = (f"loss {first:.3f}->{last:.3f} (ratio {last / first:.3f} <=0.5), t2i R@1={r1:.4f} (>=0.9), "
              f"untrained R@1<= {chance:.4f} (<0.05), {seconds:.0f}s (<=900s)")
    assert verdict(9, ok, detail)


# ---------------------------------------------------------------- 10. ablation
def test_10_token_losses_help(tiny_run, tiny_data):
    pairs = tiny_data[1]
    rows = []
    with threadpool_limits(limits=1):
        for seed in range(3):
            if seed == 0:
                full = tiny_run[1].state
            else:
                full = train(load_config(CONFIGS / "tiny.cfg"), pairs, seed).state
            instance_cfg = load_config(CONFIGS / "tiny.cfg")
            instance_cfg.loss.disable = ("tok_fre", "tok_spa")
            instance = train(instance_cfg, pairs, seed).state
            rows.append((evaluate(full, pairs).text_to_image[1], evaluate(instance, pairs).text_to_image[1]))
    wins = sum(f >= i for f, i in rows)
    table = ", ".join(f"seed {s}: {f:.3f} vs {i:.3f}" for s, (f, i) in enumerate(rows))
    assert verdict(10, wins >= 2, f"all losses vs instance-only R@1 ({table}); {wins}/3 not worse")


# ------------------------------------------------------------------ 11. bench
def test_11_acceleration_accounting(capsys):
    code = cli.main(["bench", "--config", str(CONFIGS / "tiny.cfg")])
    out = capsys.readouterr().out
    fields = dict(re.findall(r"(\w+)=([0-9.,]+)", out))
    cfg = load_config(CONFIGS / "tiny.cfg").model
    report, reference = bench(cfg), bench(without_merging(cfg))
    with_m, without_m = int(fields["total_with_merging"]), int(fields["total_without_merging"])
    forward = observed_token_counts(cfg)
    ok = (code == 0 and with_m < without_m and without_m == reference.total
          and forward == report.token_counts and fields["forward_pass_tokens"] == "32,16"
          and without_m / with_m > 1.10)
    assert verdict(11, ok, f"MACs {with_m} < {without_m}, ratio {without_m / with_m:.3f} (>1.10), "
                           f"tokens {report.token_counts} == forward {forward}")


# ------------------------------------------------------------ 12. determinism
def test_12_training_is_deterministic(tmp_path, capsys):
    cfg = tmp_path / "short.cfg"
    cfg.write_text(SHORT_RUN)
    runs = []
    for name in ("a", "b"):
        assert cli.main(["train", "--config", str(cfg), "--seed", "3", "--out", str(tmp_path / name)]) == 0
        runs.append({p.name: p.read_bytes() for p in sorted((tmp_path / name).iterdir())})
    capsys.readouterr()
    same = runs[0].keys() == runs[1].keys() and all(runs[0][k] == runs[1][k] for k in runs[0])
    steps = runs[0]["metrics.log"].count(b"\n")
    assert verdict(12, same and steps == 4,
                   f"{len(runs[0])} files byte-identical across two CLI runs ({steps} steps)")


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-v"]))
