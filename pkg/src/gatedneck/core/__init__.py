from .gradcheck import GradcheckReport, gradcheck
from .ops import ConvSpec
from .tensor import Tape, Tensor

__all__ = ["ConvSpec", "GradcheckReport", "Tape", "Tensor", "gradcheck"]
