"""Tag-guided threat scene description: HOI detection, tag/image fusion, caption generation, evaluation."""

from .captioner import CaptionDecoder, CaptionDecoderConfig, GenerationConfig, lm_loss, serialize_hoi_tags
from .data import DatasetManifest, HoiPairRecord, SceneConfig, build_splits, load_dataset, serialize_dataset
from .encoder import HoiEncoder, HoiEncoderConfig, decode_predictions
from .fusion import FusionConfig, ImageHoiFusion, Projector
from .matching import hungarian_match
from .metrics import rubric_scores, tag_metrics
from .pipeline import CaptionModel
from .report import build_report
from .trainer import TrainConfig, TrainLog, run_inference, train_caption_stage, train_hoi_stage

__version__ = "0.1.0"
