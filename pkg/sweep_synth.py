"""Dev-only sweep for synthetic dataset constants (not part of the package)."""
import sys
import numpy as np
import chromafuse.dataset as ds
import chromafuse as cf
from chromafuse.colorspace import ColorSpace, convert_array
from chromafuse.fusion import FusionModel, FusionHead, FusionKind, branch_probabilities


def probe(split, space, channel, pair):
    conv = np.moveaxis(convert_array(np.moveaxis(split.train.planes, 1, 0), space), 0, 1)
    labels = split.train.labels
    mask = np.isin(labels, pair)
    feat = conv[mask, channel].mean(axis=(1, 2))
    y = labels[mask] == pair[1]
    best = 0.5
    for t in feat:
        best = max(best, np.mean((feat > t) == y), np.mean((feat <= t) == y))
    return best


def pair_acc(scores, labels, pair):
    mask = np.isin(labels, pair)
    return float(np.mean(scores.argmax(1)[mask] == labels[mask]))


def run(noise, n, epochs, seed=11, train_seed=5):
    ds.SYNTH_PIXEL_NOISE = noise
    split = cf.synth_colorsep(n, seed=seed)
    pr = dict(
        hue01=probe(split, ColorSpace.HSV, 0, [0, 1]),
        Y01=probe(split, ColorSpace.YUV, 0, [0, 1]),
        U01=probe(split, ColorSpace.YUV, 1, [0, 1]),
        S23=probe(split, ColorSpace.HSV, 1, [2, 3]),
        V23=probe(split, ColorSpace.HSV, 2, [2, 3]),
        Y23=probe(split, ColorSpace.YUV, 0, [2, 3]),
        U23=probe(split, ColorSpace.YUV, 1, [2, 3]),
    )
    labels = split.test.labels
    scores = {}
    for space in (ColorSpace.HSV, ColorSpace.YUV):
        cfg = cf.TrainConfig(epochs=epochs, batch_size=32, seed=train_seed, dropout_rate=0.0, learning_rate=0.01)
        model, _ = cf.train_branch(space, split, cfg)
        fm1 = FusionModel({space: model}, FusionHead(FusionKind.AVERAGE, (space,)))
        scores[space] = branch_probabilities(fm1, split.test)[0]
    h, y = scores[ColorSpace.HSV], scores[ColorSpace.YUV]
    fused = (h + y) / 2
    print(f"noise={noise} n={n} ep={epochs} seed={seed}/{train_seed}")
    print("  probes " + " ".join(f"{k}={v:.3f}" for k, v in pr.items()))
    hp = (np.mean(h.argmax(1) == labels), pair_acc(h, labels, [0, 1]), pair_acc(h, labels, [2, 3]))
    yp = (np.mean(y.argmax(1) == labels), pair_acc(y, labels, [0, 1]), pair_acc(y, labels, [2, 3]))
    print(f"  HSV ov={hp[0]:.3f} p01={hp[1]:.3f} p23={hp[2]:.3f} | YUV ov={yp[0]:.3f} p01={yp[1]:.3f} p23={yp[2]:.3f}")
    print(f"  gap01={hp[1]-yp[1]:+.3f} gap23={yp[2]-hp[2]:+.3f} fused={np.mean(fused.argmax(1)==labels):.3f} max={max(hp[0],yp[0]):.3f}", flush=True)


if __name__ == "__main__":
    configs = {
        "a": (0.04, 250, 6),
        "b": (0.03, 250, 6),
        "c": (0.05, 250, 6),
        "d": (0.04, 150, 8),
    }
    for key in sys.argv[1:] or ["a"]:
        run(*configs[key])
