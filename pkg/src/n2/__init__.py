"""Dynamic message passing on graphs through pseudo nodes in a shared state space."""

from .autodiff import Rng, Tensor, backward, grad_check, no_grad
from .graphs import (BatchedGraph, Dataset, Graph, Split, degree_onehot,
                     gen_random_graph, gen_trees_match, kfold_splits,
                     load_dataset, make_batch, random_split, save_dataset,
                     unbatch)
from .message_passing import (GlobMPParams, LocalMPParams, glob_mp,
                              glob_mp_oracle, local_mp, local_mp_oracle,
                              uniform_glob_mp)
from .model import (ModelConfig, ModelParams, RecursionState, embed_inputs,
                    forward, graph_logits, init_model, init_pseudo,
                    load_checkpoint, node_logits, recurrent_step,
                    save_checkpoint)
from .proximity import (NLParams, ProximityParams, attention_scores,
                        init_proximity, piece_transform, proximity,
                        proximity_matrix)
from .training import (OptimState, TrainConfig, TrainReport, adam_step,
                       bce_multilabel, cross_entropy, cross_validate, metric,
                       train)
from .analysis import (BenchRecord, EnergyCurve, bench_scaling,
                       dirichlet_energy, dump_proximity, dump_states,
                       energy_curve, sgc_propagate)

__version__ = "0.1.0"
