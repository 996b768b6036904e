"""Bipartite graph convolution kernels, coarsening, and a training harness.

The central operator convolves a signal from an explicit input node set onto
an explicit output node set, which subsumes plain graph convolution
(identical node sets), strided/coarsened convolution (output = cluster
super-nodes), and interpolation/unpooling (output = a denser node set), and
executes work only at the requested output nodes.
"""

from .arch import ArchSpec, fuse_pooling, parse_arch, render_arch
from .bench import OpCounts, profile_forward, scaling_report
from .coarsen import (Clustering, build_coarsening_bigraph, build_expansion_bigraph,
                      midpoint_expand, voxel_grid)
from .data import (GraphSample, mnist_graph_subset, mnist_to_graph, normalize_pointcloud,
                   pixel_grid, read_idx, synthetic_shapes)
from .errors import (BuildError, ConfigError, NumericError, ParseError, RewriteError,
                     ShapeError)
from .graph import (BipartiteGraph, DirectedGraph, GraphSignal, as_bipartite,
                    isolated_out_nodes, neighborhood, radius_graph, read_graph,
                    with_self_loops, write_graph)
from .kernels import (AttentionKernel, EdgeConditionedAttentionKernel,
                      EdgeConditionedKernel, FixedKernel, eca_coeffs, ecc_weights,
                      gat_coeffs, make_kernel)
from .network import Network, build_network
from .ops import aggregate, bipartite_conv, global_max_pool, graph_conv, graph_pool
from .rng import SplitMix64
from .tensor import (Tape, Tensor, backward, grad_check, load_checkpoint, parameter,
                     save_checkpoint, segment_reduce, segment_softmax)
from .train import (Adam, AutoencoderNet, AutoencoderSpec, SGD, TrainConfig,
                    build_autoencoder, evaluate_model, train_model)

__version__ = "0.1.0"
