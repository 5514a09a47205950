"""Exception hierarchy shared by all latentcarve modules.

Two branches matter to callers: `InputError` covers malformed or
inconsistent inputs (CLI exit code 2), `NumericalError` covers failures of
the math itself such as degenerate geometry or non-finite optimization
state (CLI exit code 3).
"""


class LatentCarveError(Exception):
    pass


class InputError(LatentCarveError):
    pass


class NumericalError(LatentCarveError):
    pass


class NonPositiveDepth(NumericalError):
    """A point required to be in front of the camera has z <= 0."""


class EmptyViewport(InputError):
    """Viewport crop degenerates below one pixel."""


class IndivisibleChannels(InputError):
    """Channel count is not divisible by the requested depth-bin count."""


class ShapeMismatch(InputError):
    """Array shapes or volume frames are inconsistent."""


class EmptyMask(InputError):
    """A segmentation mask contains no positive pixels."""


class NoViews(InputError):
    """An operation requiring at least one view received none."""


class NoValidPixels(NumericalError):
    """A masked loss has an empty valid-pixel set."""


class NoValidDepth(InputError):
    """No valid depth measurement inside the object mask."""


class ObjectBehindCamera(NumericalError):
    """The object frustum extends behind the camera (z_center - radius <= 0)."""


class DegenerateElites(NumericalError):
    """All elite candidates in a CEM iteration have non-finite loss."""


class NonFiniteGradient(NumericalError):
    """Gradient or loss became non-finite during refinement."""


class EmptyInput(InputError):
    """A reduction over an empty value list was requested."""


class ManifestError(InputError):
    """Scene manifest fails to parse or violates its schema."""


class MissingFile(InputError):
    """A file referenced by a manifest does not exist."""


class NonRigidExtrinsics(InputError):
    """A pose matrix in a manifest is not a rigid transform."""
