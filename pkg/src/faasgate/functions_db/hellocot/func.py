def f(FER):
    return {"ret": "Hello Cloud of Things!"}
