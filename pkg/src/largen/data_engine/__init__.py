from .annotators import (
    STAGES,
    AnnotatorError,
    BoundSuite,
    OracleSuite,
    RemoteSuite,
    ReplaySuite,
    record_replay,
)
from .pipeline import (
    DataEngineError,
    Quadruplet,
    build_dataset,
    caption_region,
    filter_size,
    filter_tags,
    load_dataset,
    load_quadruplet,
)
from .scenes import (
    COLORS,
    NON_ENTITY_TAGS,
    SHAPES,
    SceneObject,
    SyntheticScene,
    generate_scene,
    global_caption,
    regional_caption,
    render_background,
    scene_seed,
)
