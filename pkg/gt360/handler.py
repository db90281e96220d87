class Handler:
    def __init__(self, app):
        self.app = app
