"""Federated graph collaborative filtering with user-governed data contribution.

The package simulates a federation of user devices and a central server.
Each user decides how much of their interaction data to contribute; the
server builds a bipartite graph from the contributed data, mends likely
missing links, and co-trains a global model with the devices through
light graph convolution, BPR ranking loss, and a contrastive term that
aligns device-side and server-side embedding views.
"""

__version__ = "0.1.0"

from .seeds import child_rng
from .data import (
    InteractionDataset,
    SharePolicy,
    ShareTier,
    assign_share_policy,
    attach_contributions,
    filter_k_core,
    load_interactions,
    shared_subset,
    split_dataset,
    synth_dataset,
)
from .graph import (
    BipartiteGraph,
    EmbeddingState,
    build_graph,
    default_alpha,
    ego_infer,
    layer_combine,
    lgc_propagate,
    xavier_init,
)
from .learn import (
    AdamMoments,
    CLTerm,
    GradientBundle,
    HyperParams,
    LossParts,
    LossSpec,
    adam_step,
    bpr_loss,
    combined_loss,
    compute_gradients,
    cosine_sim,
    infonce_loss,
    mending_loss,
)
from .mending import MendingArtifacts, impair_graph, mend_graph, predict_links, train_mender
from .client import DeviceState, DeviceUpload, ReceivedViews, client_local_train, sample_negatives
from .server import (
    AuditLog,
    ServerState,
    apply_ldp,
    build_server_graph,
    embedding_exchange,
    fedavg_aggregate,
    server_infer,
    server_train,
)
from .loop import RoundReport, RunContext, prepare_run, run_round, run_training, select_clients
from .evaluate import EvalResult, evaluate, ndcg_at_k, rank_candidates, recall_at_k
