"""
Recovering a sentence from its gradient
=======================================

Run the hybrid attack and the two continuous-only baselines against one
client update, first without dropout, then with frozen embeddings and
dropout on.
"""

from dataclasses import replace

from textleak import harness
from textleak.attack import ATTACKS, AttackConfig, AttackerKnowledge
from textleak.fedsim import client_step
from textleak.model import EncoderClassifier, ModelConfig
from textleak.rng import torch_generator

cfg = harness.ExperimentConfig()
vocab = harness.load_vocab_list(cfg)
samples, _ = harness.load_dataset(cfg.dataset_path(), vocab)
# the same 64 four-word sentences the harness draws victims from
pool = harness.select_samples(samples, cfg.pool_size, cfg.data_seed, cfg.num_words)


def words(ids):
    return " ".join(vocab[t] for t in ids if vocab[t] not in ("[CLS]", "[SEP]", "[PAD]"))


def attack(model, method, attack_cfg, seed=0):
    batch = harness.victim_batch(pool, 1, seed, model.config.special)
    g, _ = client_step(batch, model, dropout_generator=torch_generator(seed, "client-dropout"))
    knowledge = AttackerKnowledge.from_batch(batch, attack_cfg.known_labels,
                                             attack_cfg.known_lengths)
    result = ATTACKS[method](model, g, replace(attack_cfg, seed=seed), knowledge)
    result.score(batch, (0, 2, 3))
    print(f"{method:5s} {words(batch.token_ids[0]):32s} -> {words(result.token_ids[0]):32s} "
          f"R-1 {result.rouge['r1']:.2f} R-2 {result.rouge['r2']:.2f} ({result.wall_time:.0f}s)")
    return result


# benchmark setting: trainable embeddings, no dropout. Not every seed ends in an
# exact recovery; the acceptance suite averages over ten.
benchmark = EncoderClassifier(ModelConfig(), seed=0)
for method in ("grab", "dlg", "tag"):
    attack(benchmark, method, AttackConfig.desk())

# practical setting: frozen embeddings, dropout 0.1; the attacker learns the masks
practical = EncoderClassifier(ModelConfig(dropout_rate=0.1, freeze_embeddings=True), seed=0)
res = attack(practical, "grab", AttackConfig.desk())
print("losses per round (continuous, discrete):",
      [(round(c, 3), round(d, 3)) for c, d in res.rounds])
attack(practical, "grab", AttackConfig.desk(dropout_learning=False))

# the labels need not be known: they are learned alongside the embedding
res = attack(benchmark, "grab", AttackConfig.desk(known_labels=False))
print("recovered soft labels:", res.soft_labels.round(2).tolist())
