from . import bitstream, conditional, entropy, frames, interpred, rangecoder
from .bitstream import FrameRecord, parse, serialize
from .frames import CodecState, FeatureCodec

__all__ = [
    "bitstream", "conditional", "entropy", "frames", "interpred", "rangecoder",
    "FrameRecord", "parse", "serialize",
    "CodecState", "FeatureCodec",
]
