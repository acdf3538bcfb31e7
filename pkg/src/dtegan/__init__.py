"""Text-to-image GAN with dual text embeddings: a generation-side and a
discrimination-side sentence encoder trained end to end under strict
gradient-routing rules, plus metrics and an ablation harness."""

from .data import (Batch, CaptionedImage, CaptionedImageDataset, TokenSequence,
                   Vocabulary, build_vocab, dominant_color, export_manifest,
                   load_dataset, make_batches, recover_attributes,
                   synthesize_toy_dataset, tokenize)
from .discriminator import Discriminator, DiscriminatorOutput
from .generator import (ConditionAugmentation, ConditionalBatchNorm2d,
                        ConditionVector, Generator, UpBlock, sample_noise)
from .losses import (LossBundle, RoutingFlags, adv_g, assemble_losses,
                     build_routing_plan, contrastive_loss, hinge_d, magp, sim)
from .evaluation import (AblationVariant, MetricsReport, evaluate_trainer,
                         fid, generate_images, inception_score,
                         make_feature_extractor, r_precision,
                         r_precision_from_features, run_ablation, table5_grid,
                         table6_grid, table7_grid, table8_grid)
from .text import (DualSentenceEmbedding, DualTextEncoder, ParameterGroups,
                   SentenceEncoder, partition_parameters)
from .trainer import (MagpSettings, RunDirectory, TrainConfig, Trainer,
                      apply_routing_schedule, build_models, load_checkpoint,
                      save_checkpoint)

__version__ = "0.1.0"
