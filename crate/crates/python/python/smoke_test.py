"""Smoke test for the gcms_raster extension module.

Build first:  maturin develop --release  (from crates/python)
"""
import math
import struct
import tempfile

import gcms_raster as g


def main():
    samples = g.synth_dataset(n_samples=40, seed=7)
    assert len(samples) == 40
    sample, labels = samples[0]
    assert len(labels) == g.NUM_LABELS

    raster = g.rasterize(sample)
    assert raster.shape == (256, 192)
    gcr1 = raster.to_gcr1()
    assert gcr1[:4] == b"GCR1"
    assert struct.unpack("<3I", gcr1[4:16]) == (256, 192, 3)
    assert raster.to_png()[:8] == b"\x89PNG\r\n\x1a\n"
    assert raster.resize(128).shape == (256, 128)

    cfg = g.RasterConfig(n_time_slots=64, norm="time", log="clipped")
    assert g.rasterize(sample, cfg).shape == (256, 64)

    assert g.clip_probs(0.0) == 1e-4
    assert abs(g.combine_probs([0.9, 0.5]) - 1 / (1 + math.exp(-math.log(9) / 2))) < 1e-9
    half = {s.sample_id: [0.5] * 9 for s, _ in samples}
    truth = {s.sample_id: l for s, l in samples}
    assert abs(g.aggregated_log_loss(half, truth) - math.log(2)) < 1e-9
    assert g.ensemble_predictions([half]) == half
    assert g.warp_time([0.0, 0.25, 1.0], 1.0) == [0.0, 0.25, 1.0]
    assert g.lr_at(1.0) == 0.0
    assert g.temperature_scaled_slots(40.0, 200.0, 320.0) == 110

    model = g.Model.train(samples, epochs=10, seed=1)
    assert model.loss_trace[-1] < model.loss_trace[0]
    preds = {s.sample_id: model.predict(s, tta=True) for s, _ in samples}
    loss = g.aggregated_log_loss(preds, truth)
    assert loss < math.log(2), loss

    with tempfile.TemporaryDirectory() as tmp:
        model.save(f"{tmp}/params.gcmp")
        again = g.Model.load(f"{tmp}/params.gcmp")
        assert again.predict(sample) == model.predict(sample)

    try:
        g.Sample("empty", [], [], [])
    except ValueError:
        pass
    else:
        raise AssertionError("empty sample accepted")

    print(f"smoke test ok: train loss {model.loss_trace[-1]:.4f}, tta eval loss {loss:.4f}")


if __name__ == "__main__":
    main()
