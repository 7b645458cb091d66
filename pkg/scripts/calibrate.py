"""Seed sweeps behind the frozen acceptance thresholds.

Each sweep prints one line per seed and a summary, and appends rows to
``<out>/calibration.csv`` (same header as experiment metrics). Example:

    python3 scripts/calibrate.py gbp-convergence --seeds 20
    python3 scripts/calibrate.py all --seeds 20 --out calib
"""
import argparse
import csv
from pathlib import Path
import time

import numpy as np

from backvis.experiments import make_config, run
from backvis.images import desk_image, preprocess
from backvis.network import build, deep_cnn, forward, three_layer_cnn
from backvis.tensor import RngSpec, cosine
from backvis.theory import deconv_pool_equals_gbp_check, gbp_theorem1_oracle, streamed_fcn_maps
from backvis.visualize import VisMethod, backward

FILTERS = (8, 16, 32, 64, 128, 256)
HIDDEN = (5000, 10000, 40000)


def scene():
    return preprocess(desk_image("scene", 64, 3, 0))


def gbp_convergence(seeds, emit):
    x = scene()
    med = []
    for n in FILTERS:
        vals = []
        for s in seeds:
            net = build(three_layer_cnn(n_filters=n), x.shape, RngSpec(s))
            tr = forward(net, x)
            k = int(np.argmax(tr.logits))
            v = cosine(backward(net, tr, k, VisMethod.GBP).raw, gbp_theorem1_oracle(x, net.plan(0)))
            vals.append(v)
            emit(s, "gbp", k, f"N={n}.cosine_oracle", v)
        med.append(float(np.median(vals)))
        print(f"N={n:4d} median cosine vs oracle {med[-1]:.4f}")
    slope = np.polyfit(np.log(FILTERS), np.log(1.0 - np.array(med)), 1)[0]
    print(f"log-log slope of 1-cosine: {slope:.3f}")


def noise(seeds, emit):
    x = scene()
    for s in seeds:
        net = build(three_layer_cnn(), x.shape, RngSpec(s))
        tr = forward(net, x)
        k = int(np.argmax(tr.logits))
        for m in (VisMethod.SALIENCY, VisMethod.DECONVNET):
            v = cosine(backward(net, tr, k, m).raw, x)
            emit(s, m.value, k, "cosine_input", v)
            print(s, m.value, f"{v:+.4f}")


def maxpool(seeds, emit):
    x = scene()
    dg, pn = [], []
    for s in seeds:
        pooled = build(three_layer_cnn(pool=2), x.shape, RngSpec(s))
        plain = build(three_layer_cnn(), x.shape, RngSpec(s))
        tp, tn = forward(pooled, x), forward(plain, x)
        kp, kn = int(np.argmax(tp.logits)), int(np.argmax(tn.logits))
        dg.append(deconv_pool_equals_gbp_check(pooled, x, kp))
        pn.append(cosine(backward(pooled, tp, kp, "gbp").raw, backward(plain, tn, kn, "gbp").raw))
        emit(s, "deconvnet", kp, "deconv_gbp_cosine", dg[-1])
        emit(s, "gbp", kp, "gbp_pool_vs_nopool", pn[-1])
    print(f"median deconv-vs-gbp {np.median(dg):.4f}, median gbp pool-vs-nopool {np.median(pn):.4f}")


def depth(seeds, emit):
    x = scene()
    g, sal = [], []
    for s in seeds:
        net = build(deep_cnn(), x.shape, RngSpec(s))
        tr = forward(net, x)
        k = int(np.argmax(tr.logits))
        g.append(cosine(backward(net, tr, k, "gbp").raw, gbp_theorem1_oracle(x, net.plan(0))))
        sal.append(cosine(backward(net, tr, k, "saliency").raw, x))
        emit(s, "gbp", k, "cosine_oracle", g[-1])
        emit(s, "saliency", k, "cosine_input", sal[-1])
    print(f"median gbp vs oracle {np.median(g):.4f} (min {min(g):.4f}), "
          f"median |saliency| {np.median(np.abs(sal)):.4f}")


def fcn(seeds, emit):
    x = scene()
    for h in HIDDEN:
        vals = []
        for s in seeds:
            maps, k, _ = streamed_fcn_maps(x, h, RngSpec(s), methods=(VisMethod.GBP,))
            vals.append(cosine(maps[VisMethod.GBP], x))
            emit(s, "gbp", k, f"fcn.Nh={h}.cosine_input", vals[-1])
        print(f"Nh={h} median GBP cosine vs input {np.median(vals):.4f}")
    cnn = []
    for s in seeds:
        net = build(three_layer_cnn(n_filters=64), x.shape, RngSpec(s))
        tr = forward(net, x)
        cnn.append(cosine(backward(net, tr, int(np.argmax(tr.logits)), "gbp").raw, x))
    print(f"CNN N=64 median GBP cosine vs input {np.median(cnn):.4f}")


def _experiment_sweep(name, raw, metric_pairs):
    def sweep(seeds, emit):
        for s in seeds:
            r = run(make_config(name, {**raw, "images": "no"}, out="/tmp/backvis-calibrate", seed=s))
            for row in r.rows:
                emit(s, row.method, row.target_logit, row.metric, row.value)
            ratios = []
            for a, b, metric in metric_pairs:
                ratios.append(r.metric(metric, a)[0] / r.metric(metric, b)[0])
            print(s, " ".join(f"{a}/{b}={q:.3f}" for (a, b, _), q in zip(metric_pairs, ratios)))
    return sweep


SWEEPS = {
    "gbp-convergence": gbp_convergence,
    "noise": noise,
    "maxpool": maxpool,
    "depth": depth,
    "fcn": fcn,
    "l2-stats": _experiment_sweep("l2-stats", {}, [("saliency", "gbp", "random.mean_l2"),
                                                   ("saliency", "deconvnet", "random.mean_l2")]),
    "fgsm": _experiment_sweep("fgsm", {}, [("saliency", "gbp", "mean_l2_change")]),
}


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("sweep", choices=[*SWEEPS, "all"])
    p.add_argument("--seeds", type=int, default=20)
    p.add_argument("--out", default=".")
    args = p.parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "calibration.csv"
    fresh = not path.exists()
    with open(path, "a", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if fresh:
            w.writerow(("experiment", "seed", "method", "target_logit", "metric", "value"))
        for name in (SWEEPS if args.sweep == "all" else [args.sweep]):
            t = time.time()
            print(f"== {name}")

            def emit(seed, method, k, metric, value, name=name):
                w.writerow((name, seed, method, "" if k is None else k, metric, f"{float(value):.12g}"))

            SWEEPS[name](range(args.seeds), emit)
            print(f"   ({time.time() - t:.0f}s)")


if __name__ == "__main__":
    main()
