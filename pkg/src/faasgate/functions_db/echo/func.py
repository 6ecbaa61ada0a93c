def f(FER):
    return FER["x"]
