#!/usr/bin/env python3
"""Smoke test for the roams_py extension module.

Build the extension first, then run this script:

    cargo build --release -p roams-py
    python3 python/smoke_test.py
"""

import importlib.machinery
import importlib.util
import math
import sys
from pathlib import Path


def load_extension():
    root = Path(__file__).resolve().parents[1]
    candidates = [
        root / "target" / "release" / "libroams_py.so",
        root / "target" / "debug" / "libroams_py.so",
    ]
    for path in candidates:
        if path.exists():
            loader = importlib.machinery.ExtensionFileLoader("roams_py", str(path))
            spec = importlib.util.spec_from_loader("roams_py", loader)
            module = importlib.util.module_from_spec(spec)
            loader.exec_module(module)
            return module
    sys.exit("libroams_py.so not found; run `cargo build -p roams-py` first")


def main():
    roams = load_extension()
    print(f"loaded roams_py {roams.__version__}")

    # Reference values for the detection threshold and Huber loss.
    assert abs(roams.default_threshold(2) - math.sqrt(9.21034037)) < 1e-6
    assert roams.huber_rho(1.0, 2.0) == 1.0
    assert roams.huber_rho(3.0, 2.0) == 8.0
    assert abs(roams.mahalanobis([3.0, 4.0], [[1.0, 0.0], [0.0, 1.0]]) - 5.0) < 1e-12
    print("PASS scalar helpers")

    # Simulate a contaminated track and fit both estimators.
    train, test, outliers = roams.simulate_dcrw(150, seed=11, rate=0.10, distance=5.0)
    assert len(train) == 150 and len(test) == 20
    assert len(outliers) == math.floor(0.10 * 149)
    print(f"PASS simulate ({len(outliers)} outliers injected)")

    classical = roams.fit_dcrw(train, method="classical")
    assert classical.method == "classical"
    assert not classical.flagged
    assert 0.0 <= classical.theta["phi"] <= 1.0
    print(f"PASS classical fit (phi = {classical.theta['phi']:.3f})")

    fit = roams.fit_dcrw(train, method="roams", grid_size=20)
    hits = set(fit.flagged) & set(outliers)
    sensitivity = len(hits) / len(outliers)
    assert fit.method == "roams"
    assert fit.selected_lambda is not None
    assert sensitivity >= 0.8, f"sensitivity {sensitivity}"
    assert len(fit.bic_curve) == 20
    # Robust fit should not inflate the observation variance the way the
    # classical fit does on contaminated data.
    assert fit.theta["sigma2_v1"] < classical.theta["sigma2_v1"]
    print(
        f"PASS roams fit (lambda* = {fit.selected_lambda:.2f}, "
        f"sensitivity = {sensitivity:.2f})"
    )

    # JSON round trip.
    again = roams.FitResult.from_json(fit.to_json())
    assert again.flagged == fit.flagged
    assert again.theta == fit.theta
    print("PASS report JSON round trip")

    # Forecasting: the first forecast is pinned to the first observation,
    # and an injected 5-unit outlier is flagged by the FUT filter.
    spiked = list(test)
    y10 = spiked[10]
    spiked[10] = (y10[0] + 5.0, y10[1])
    yhat, flagged, err = roams.forecast_dcrw(fit, spiked, filter="fut")
    assert abs(yhat[0][0] - spiked[0][0]) < 1e-9
    assert abs(yhat[0][1] - spiked[0][1]) < 1e-9
    assert flagged[10], "injected outlier not flagged"
    assert err is not None and err > 0.0
    print(f"PASS forecast (msfe = {err:.3f}, outlier flagged)")

    # Kalman vs FUT with an infinite threshold agree.
    yhat_k, _, err_k = roams.forecast_dcrw(fit, test, filter="kalman")
    yhat_f, _, err_f = roams.forecast_dcrw(fit, test, filter="fut", c=float("inf"))
    assert yhat_k == yhat_f and err_k == err_f
    print("PASS filter reduction (kalman == fut at c = inf)")

    # Smoothing with missing values present.
    with_gaps = list(train)
    with_gaps[5] = None
    with_gaps[70] = None
    means, variances = roams.smooth_dcrw(fit, with_gaps)
    assert len(means) == len(with_gaps)
    assert all(len(m) == 4 for m in means)
    assert all(v[0] >= -1e-10 for v in variances)
    print("PASS smoothing")

    print("all smoke tests passed")


if __name__ == "__main__":
    main()
