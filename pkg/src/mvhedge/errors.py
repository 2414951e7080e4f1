"""Exception types raised by the hedging engine.

Each class carries the process exit code used by the command-line front end.
"""


class MVHedgeError(Exception):
    exit_code = 1


class ConfigInvalid(MVHedgeError):
    exit_code = 2


class BlowUp(MVHedgeError):
    """A Riccati solution left the finite region before reaching the end of the grid."""

    exit_code = 3

    def __init__(self, what, t, norm=None):
        self.what = what
        self.t = float(t)
        self.norm = norm
        msg = f"{what} blew up at t={self.t:.6g}"
        if norm is not None:
            msg += f" (norm {norm:.3g})"
        super().__init__(msg)


class NumericOverflow(MVHedgeError):
    exit_code = 4

    def __init__(self, path, t):
        self.path = int(path)
        self.t = float(t)
        super().__init__(f"non-finite state on path {self.path} at t={self.t:.6g}")


class NotPositiveDefinite(MVHedgeError):
    exit_code = 3

    def __init__(self, t, eig):
        self.t = float(t)
        self.eig = float(eig)
        super().__init__(f"covariance lost positive definiteness at t={self.t:.6g} "
                         f"(smallest eigenvalue {self.eig:.3g})")


class SingularMatrix(MVHedgeError):
    pass


class SingularBlock(MVHedgeError):
    pass


class ConfigMismatch(MVHedgeError):
    pass


class FlowsMissing(MVHedgeError):
    pass


class OrderUnsupported(MVHedgeError):
    pass
