"""Smoke test for the cmmoco_py extension."""

import os
import tempfile

import cmmoco_py as cm

CONFIG = """
n_ids = 12
n_train_ids = 8
epochs = 2
warmup_epochs = 1
decay_epochs = []
batch_p = 4
batch_k = 2
queue_size = 16
feature_dim = 32
gru_hidden = 16
visual_hidden = [32]
"""


def main():
    keys = cm.config_keys()
    assert "queue_size" in keys, keys
    text = cm.config_text(CONFIG)
    assert cm.config_text(text) == text

    ds = cm.Dataset.generate(text)
    print(ds)
    assert len(ds) > 0
    assert len(ds.identities("test")) == 4

    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "data.cmmd")
        ds.save(path)
        again = cm.Dataset.load(path)
        assert repr(again) == repr(ds)

        model = cm.train_model(ds, text)
        assert model.epoch == 2
        metrics = model.metrics()
        assert len(metrics) == 2 and all(m["total"] == m["total"] for m in metrics)

        ckpt = os.path.join(d, "model.cmmc")
        model.save(ckpt)
        loaded = cm.Model.load(ckpt)
        reports = loaded.evaluate(ds, rerank_k=3)
        assert len(reports) == 4
        for r in reports:
            print(r["direction"], "rerank" if r["reranked"] else "plain", "rank1=%.2f map=%.2f" % (r["rank_k"][1], r["map"]))

        texts, tids = loaded.encode(ds, "test", "text")
        images, iids = loaded.encode(ds, "test", "image")
        direct = cm.evaluate(texts, tids, images, iids, rerank_k=3)
        assert [r["map"] for r in direct] == [r["map"] for r in reports]

        feats = os.path.join(d, "text.cmmf")
        cm.save_features(feats, "text", texts, tids)
        modality, rows, ids = cm.load_features(feats)
        assert modality == "text" and ids == tids and len(rows) == len(texts)

    try:
        cm.config_text("bogus_key = 1")
    except ValueError:
        pass
    else:
        raise AssertionError("unknown key accepted")

    results = cm.gradcheck(seed=0, instances=5)
    assert all(r["passed"] for r in results), results
    print("gradcheck:", ", ".join(r["name"] for r in results))
    print("smoke test passed")


if __name__ == "__main__":
    main()
