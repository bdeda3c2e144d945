"""Target-bitrate encode search over a dyadic spatial/temporal ladder."""

__version__ = "0.1.0"

from .media_io import Frame, VideoClip, read_y4m, write_y4m, validate_clip, load_y4m, save_y4m  # noqa: E402
from .metrics import MetricSet, metric_set, psnr, psnr_hvs  # noqa: E402
from .codec_backend import CodecSpec, ExternalCodec, MockCodec, MockModel, rate_of, render_command  # noqa: E402
from .rate_search import (  # noqa: E402
    EncodeAttempt,
    SearchConfig,
    SearchOutcome,
    next_request,
    reconstruct_full,
    run_search,
    run_spatial_search,
    select_representation,
)
