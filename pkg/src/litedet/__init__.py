"""A small numpy laboratory for lightweight detector engineering.

Blocks (GhostConv, Ghost_HGBlock, HGStem, FasterBlock/C2f-Faster, GCDetect and
their baselines), a declarative model graph with a forward executor, exact
parameter/MAC accounting, the Inner-MPDIoU box loss with analytic gradients,
and LAMP channel pruning to a target MAC speed-up.
"""

from .errors import (ConfigError, CorruptionError, GraphError, LitedetError, PruneError,
                     ShapeError, WeightError)
from .tensor import (ConvParams, Tensor4, add, concat_channels, conv2d, load_tensor, maxpool2d,
                     save_tensor, silu, split_channels, upsample_nearest2x)
from .rng import SplitMix64
from .blocks import build_block, describe, param_count
from .graph import (ModelGraph, WeightStore, forward_graph, init_weights, load_graph,
                    load_graph_file, load_weights, save_weights)
from .fixtures import load_fixture
from .cost import CostReport, compare_reports, graph_cost, layer_cost
from .boxloss import (BoxCWH, CornerBox, LossContext, ciou, inner_box, inner_mpdiou,
                      inner_mpdiou_loss_grad, iou, mpd_distances)
from .prune import (PrunePlan, apply_prune, build_coupling_groups, channel_importance,
                    lamp_scores, search_speedup, select_channels)

__version__ = "0.1.0"
