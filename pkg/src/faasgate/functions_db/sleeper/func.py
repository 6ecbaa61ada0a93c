import time


def f(FER):
    seconds = float(FER["x"].get("seconds", 0.0))
    time.sleep(seconds)
    return {"ret": seconds}
