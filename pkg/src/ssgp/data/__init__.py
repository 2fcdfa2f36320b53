from .dataset import Dataset, read_meta, read_sample, write_meta, write_sample
from .formats import (FormatError, read_flo, read_pfm, read_pgm, read_ppm, write_error_map,
                      write_flo, write_pfm, write_pgm, write_ppm)
from .sample import TASK_CHANNELS, TASKS, Sample, canonical_task
from .synthetic import synth_scene
from .transforms import (AugmentRanges, NormStats, add_noise, denormalize, normalize,
                         photometric_augment, prepare_input, sparsify)
