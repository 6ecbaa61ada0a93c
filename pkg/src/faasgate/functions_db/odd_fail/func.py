def f(FER):
    i = FER["x"]["i"]
    if i % 2 == 1:
        raise ValueError(f"odd input {i} rejected")
    return {"ret": i}
