"""Builds a small synthetic index through the bindings and checks the stages end to end."""

import json
import os
import tempfile

import dsm_py


def main():
    database, queries, gt = dsm_py.synth(seed=7, queries=3, multiscale=False)
    assert len(database) == 15 and len(queries) == 3

    q = queries[0]
    assert dsm_py.TensorSet.from_bytes(q.to_bytes()).to_bytes() == q.to_bytes()
    feats = dsm_py.detect_features(q)
    assert feats and all(len(f) == 5 for f in feats)

    m = dsm_py.match_pair(q, next(s for s in database if s.image_id == "q000_pos0"))
    assert m.inliers >= 4 and len(m.correspondences) == m.inliers, m

    index = dsm_py.Index.build(database)
    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "index.dsmi")
        index.save(path)
        assert dsm_py.Index.load(path).to_bytes() == index.to_bytes()

    runs = []
    for q in queries:
        ranking = index.query(q, diffuse=True)
        assert len(ranking) == len(index)
        assert {stage for _, _, stage in ranking} == {"diffusion"}
        runs.append((q.image_id, [i for i, _, _ in ranking]))
    medium, _ = dsm_py.evaluate(runs, gt)
    cosine, _ = dsm_py.evaluate([(q.image_id, [i for i, _, _ in index.query(q, rerank=0)]) for q in queries], gt)
    print(f"mAP cosine {cosine:.3f}, pipeline {medium:.3f}")
    assert medium >= cosine

    flat = dsm_py.TensorSet("flat", 2, 4, 4, [0.0] * 32)
    assert flat.scales == [(1.0, 4, 4)]
    try:
        dsm_py.TensorSet.from_bytes(b"XXXX")
    except dsm_py.DsmError as e:
        assert "magic" in str(e)
    else:
        raise AssertionError("bad magic accepted")
    json.loads(dsm_py.default_config())
    print("smoke test passed")


if __name__ == "__main__":
    main()
