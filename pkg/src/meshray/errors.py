"""Exception hierarchy.

Everything raised on purpose by meshray derives from :class:`MeshrayError`.
:class:`InputError` covers bad user input (files, configs, ids, arguments);
:class:`InvariantError` covers misuse of scene state and broken internal
invariants. The CLI maps the former to exit code 1 and the latter to 2.
"""


class MeshrayError(Exception):
    pass


class InputError(MeshrayError):
    pass


class InvariantError(MeshrayError):
    pass


class NonComposableScale(InputError, ValueError):
    """Non-uniform scale combined with a non axis-aligned rotation."""


class EmptyMesh(InputError, ValueError):
    pass


class EmptyInput(InputError, ValueError):
    pass


class CountMismatch(InputError, ValueError):
    pass


class UnknownId(InputError, LookupError):
    pass


class IndexOutOfRange(InputError, IndexError):
    pass


class UncommittedSubScene(InvariantError):
    pass


class DirtyScene(InvariantError):
    """Simulation or query against a scene with uncommitted modifications."""


class EmptyPoseBatch(InputError, ValueError):
    pass


class InvalidModel(InputError, ValueError):
    pass


class ResolutionOutOfRange(InvalidModel):
    pass


class InvalidSpec(InputError, ValueError):
    pass


class MissingAttributes(InputError, ValueError):
    pass


class ParseError(InputError, ValueError):
    def __init__(self, message, path=None, line=None, offset=None):
        where = []
        if path is not None:
            where.append(str(path))
        if line is not None:
            where.append(f"line {line}")
        if offset is not None:
            where.append(f"offset {offset}")
        prefix = ":".join(where)
        super().__init__(f"{prefix}: {message}" if prefix else message)
        self.path = path
        self.line = line
        self.offset = offset


class UnsupportedFeature(InputError, ValueError):
    pass


class UnknownObjectName(InputError, LookupError):
    pass


class NonUnitQuaternion(InputError, ValueError):
    pass
