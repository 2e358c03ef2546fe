"""
FedSGD rounds and client-side defenses
======================================

Train the toy classifier for a few rounds, then look at what the two
defenses do to a shared gradient.
"""

from textleak import harness
from textleak.fedsim import Defense, FedConfig, apply_defense, client_step
from textleak.model import EncoderClassifier, ModelConfig

cfg = harness.ExperimentConfig()
vocab = harness.load_vocab_list(cfg)
samples, report = harness.load_dataset(cfg.dataset_path(), vocab)
print(f"{report.lines} sentences, {report.unknown_count} unknown words")

# 100 rounds with one client of 16 sentences each
model = EncoderClassifier(ModelConfig(), seed=0)
train, held_out = samples[:400], samples[400:]
print("MCC before:", round(harness.utility_mcc(model, held_out), 3))
harness.train_model(model, train, FedConfig(rounds=100, server_lr=0.1), batch_size=16)
print("MCC after: ", round(harness.utility_mcc(model, held_out), 3))

# what one client would share for a single sentence
g, _ = client_step(samples[0], model)
print("clean update norm", round(float(g.norm()), 4))

# clip each layer to norm 0.1 then add Gaussian noise
noisy = apply_defense(g, Defense.noise(0.05, 0.1))
print("noised update norm", round(float(noisy.norm()), 4))

# zero the 90% smallest entries
pruned = apply_defense(g, Defense.prune(0.9))
zeros = int((pruned.flat() == 0).sum())
print(f"pruned update keeps {g.numel() - zeros} of {g.numel()} entries")
