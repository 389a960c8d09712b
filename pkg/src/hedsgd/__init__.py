"""Decentralized SGD over multiparty BFV, with a simulated network and experiment runner."""
from .bfv import PRESETS, Ciphertext, Plaintext, PublicKey, SecretKey, decrypt, encrypt, preset
from .codec import EncodingOverflow, FixedPointConfig, decode, encode
from .dpsgd import TrainConfig, TrainingAbort, run_training
from .netsim import MixingMatrix, Network, Topology, gen_topology, mixing_matrix
from .ring import NoiseParams, Poly, RingParams

__all__ = [
    "PRESETS", "Ciphertext", "Plaintext", "PublicKey", "SecretKey", "decrypt", "encrypt", "preset",
    "EncodingOverflow", "FixedPointConfig", "decode", "encode",
    "TrainConfig", "TrainingAbort", "run_training",
    "MixingMatrix", "Network", "Topology", "gen_topology", "mixing_matrix",
    "NoiseParams", "Poly", "RingParams",
]
