import numpy as np


def f(FER):
    spectrum = np.fft.fft(np.asarray(FER["x"]["block"], dtype=float))
    return {"re": [float(v) for v in spectrum.real],
            "im": [float(v) for v in spectrum.imag]}
