# settings.py

# Dataset generation
SPLIT_RATIOS = {"train": 0.6, "val": 0.2, "test": 0.2}
SPLITS = ("train", "val", "test")
DEFAULT_DATASET = {
    "nodes": 300,
    "classes": 4,
    "d_z": 16,
    "intra_p": 0.1,
    "inter_p": 0.01,
    "feature_noise": 1.5,
    "seed": 7,
}

# Neighbor Detail Template
NDT_HOPS = 2
NDT_BRANCH = (10, 10)
DESK_NDT_BRANCH = (3, 3)
NEIGHBOR_ORDERS = ("sorted", "shuffle")

# Language model
LM_DEFAULTS = {
    "d_model": 64,
    "n_layers": 4,
    "n_heads": 4,
    "max_len": 256,
}
LORA_DEFAULTS = {"rank": 8, "alpha": 32.0, "targets": ("attn", "mlp")}
LAYER_NORM_EPS = 1e-6

# Instruction templates
NODE_PROMPT = ["what", "is", "the", "category", "of", "this", "node", "?", "answer", ":"]
LINK_PROMPT = ["are", "these", "two", "nodes", "connected", "?", "answer", ":"]
LINK_LABELS = ("no", "yes")
SPECIAL_TOKENS = ["<pad>", "<unk>"]

# Reconstruction objectives
VARIANTS = ("vanilla", "decoder", "similarizer", "denoiser")
LATENT_VARIANTS = ("similarizer", "denoiser")
LAMBDA_F = 0.4
LAMBDA_S = 2.0
LAMBDA_L = 1.0
LAMBDA_F_GRID = [0.1, 0.2, 0.4, 0.6, 0.8, 1.0]
LAMBDA_S_GRID = [1.0, 2.0, 4.0, 6.0, 8.0, 10.0]
LAMBDA_L_GRID = [round(0.2 * i, 1) for i in range(1, 11)]

# Diffusion
DIFFUSION_STEPS = 100
BETA_START = 1e-4
BETA_END = 0.02
DENOISER_BLOCKS = 1

# GNN pretraining
GNN_DEFAULTS = {
    "n_layers": 3,
    "d_e": 32,
    "k": 4,
    "K": 8,
    "mask_ratio": 0.8,
    "epochs": 100,
    "lr": 1e-3,
    "warmup_epochs": 10,
}
DENSE_BIAS_MAX_NODES = 200

# Training
LEARNING_RATE = 5e-4
WARMUP_RATIO = 0.03
REPLICATE = 3
REPLICATE_MAX_NODES = 500
EXPERIMENT_SEEDS = 5

# Reports
METRICS_HEADER = [
    "epoch", "step", "loss_text", "loss_graph", "loss_total",
    "bound_report", "val_acc", "val_f1",
]
TIMING_HEADER = ["epoch", "wall_time_s", "peak_memory_note"]
EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_ACCEPTANCE = 4
