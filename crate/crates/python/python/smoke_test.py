"""Smoke test for the addrop_py extension module.

Build and install first:  pip install --no-build-isolation ./crates/python
"""

import math
import os
import tempfile

import addrop_py as ad


def main():
    splits = ad.synthetic("classify", seed=1, num_train=48, num_dev=32, num_test=16)
    assert len(splits.train) == 48 and splits.num_classes == 2
    assert splits.train.tokens(0)[0] == 2  # cls id

    model = ad.Model("classify", splits.vocab_size, splits.num_classes, seed=0,
                     hidden_size=16, head_size=4, ffn_size=32)
    logits = model.logits(splits.dev, [0, 1])
    assert len(logits) == 2 and len(logits[0]) == 2

    att = model.attention(splits.dev, [0], 0)
    for row in att[0][0]:
        assert abs(sum(row) - 1.0) < 1e-9

    scores = model.attribute(splits.dev, [0, 1], layers=[0, 1], method="ga")
    assert sorted(scores) == [0, 1]
    n = len(splits.dev.tokens(0))
    mask = ad.mask_from_scores([row[:n] for row in scores[0][0][0][:n]], p=0.5, q=1.0)
    dropped = sum(1 for row in mask for x in row if x < 0)
    assert dropped > 0

    result = ad.train(model, splits.train, splits.dev, max_epochs=3, batch_size=16,
                      learning_rate=3e-3, p=0.3, q=0.3)
    assert len(result.reports) == 3
    assert result.reports[1]["phase"] == "addrop"
    assert all(math.isfinite(r["train_loss"]) for r in result.reports)

    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "m.ckpt")
        result.model.save(path)
        back = ad.Model.load(path)
        assert back.checksum() == result.model.checksum()
        assert back.evaluate(splits.dev)["metric"] == result.best_metric

    assert ad.mcc([1, 0, 1, 1], [1, 0, 0, 1]) > 0
    r, undefined = ad.pearson([1.0, 1.0], [0.0, 2.0])
    assert undefined and r == 0.0
    try:
        ad.Model("sideways", 10, 2)
    except ValueError:
        pass
    else:
        raise AssertionError("bad task accepted")
    print("addrop_py smoke test passed:", model, result.best_metric)


if __name__ == "__main__":
    main()
