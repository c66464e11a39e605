from .scene import (
    ObjectSpec,
    SceneScript,
    SequenceRecord,
    default_camera,
    generate_sequence,
    random_script,
    rigid_motion_oracle,
    simulate_sceneflow_pair,
    track_oracle,
)
from .augment import TrainingSample, augment, clip_from_record, hflip, scale, select_visible_queries, tflip
from .io import SequenceFormatError, read_sequence, read_tracks_csv, write_sequence, write_tracks_csv
