"""Calibration script for the default synthesizer frequency granularity.

The rms transport displacement error as a function of the frequency step is
strongly non-monotone (near-rational ratios between the per-interval
detuning increment and the grid produce correlated rounding), so the
default is picked from a scan of the reference transport ensemble
(L ~ Normal(30 um, 5 um), uniform trigger phase): a region where the rms
rises smoothly through 190 nm, stable across seeds.

The scan also prints the ensemble mean: the quantizer systematically
undershoots by a few tens of nanometers (the low-velocity ramp ends round
to zero detuning), independent of the step over the scanned range.  That
offset is common to every transport, so placement spreads and
calibration-shift measurements are unaffected.

Run:  python tools/calibrate_synth.py
"""

import numpy as np

from latticeloc.transport import SynthesizerModel, motion_profile, quantize_profile


def scan(lo_hz: float, hi_hz: float, step_hz: float, n=3000, seed=77):
    rng = np.random.default_rng(seed)
    lengths = -rng.normal(30.0, 5.0, n)
    triggers = rng.random(n)
    for s in np.arange(lo_hz, hi_hz + step_hz / 2, step_hz):
        synth = SynthesizerModel(freq_step_hz=float(s))
        errs = np.array(
            [
                quantize_profile(motion_profile(L), synth, u)[1]
                for L, u in zip(lengths, triggers)
            ]
        )
        print(
            f"{s:8.0f} Hz: mean {errs.mean() * 1e3:+7.1f}  "
            f"std {errs.std(ddof=1) * 1e3:6.1f}  "
            f"rms {np.sqrt(np.mean(errs**2)) * 1e3:6.1f} nm"
        )


if __name__ == "__main__":
    print("coarse scan:")
    scan(43000, 52000, 500, n=1500)
    print("\nfine scan around the adopted default (49660 Hz):")
    scan(49500, 49800, 20, n=3000)
