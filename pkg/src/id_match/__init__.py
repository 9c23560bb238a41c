try:
    from ._version import version as __version__
    from ._version import version_tuple
except ImportError:
    __version__ = "0.0.0"
    version_tuple = (0, 0, 0)


from id_match.errors import (
    ConfigError,
    DomainError,
    EmptyGraphError,
    FormatError,
    IdMatchError,
    NumericError,
    ShapeError,
)
from id_match.graph import (
    CharacterMask,
    FeatureMap,
    IdentityMatchingGraph,
    MatchConfig,
    MqaParams,
    build_img,
    build_multiscale,
    consistency_score,
    matching_loss,
)
from id_match.guidance import assign_identities, render_ieg, reorder_identities
from id_match.numcore import backward, grad_check
from id_match.sampling import PreClassifiedSampler, classify_pairs, sample_pair
from id_match.synth import SceneSpec, gen_dataset, gen_scene

from id_match import testing
