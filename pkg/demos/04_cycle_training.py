"""Joint training with cycle losses on top of stage-1 checkpoints.

Wild images have no labels, so they only enter through the image cycle
RGB -> X -> RGB. The demo measures that cycle's error on held-out wild images
before and after a short joint run. It only helps on top of reasonably
converged stage-1 models, with a wild pool well beyond a handful of images and
a joint learning rate below the stage-1 one. Short or small runs can make
held-out images worse. Takes about two minutes.

    python demos/04_cycle_training.py
"""

from ouro import sceneforge as sf
from ouro.core import Profile
from ouro.trainer import TensorDataset, TrainConfig, cycle_errors, train_cycle, train_stage1

res = 32
ann = TensorDataset.from_records(
    sf.make_record(f"a{i}", 300 + i, Profile.INDOOR if i % 2 == 0 else Profile.CITY, resolution=res) for i in range(16))
wild = TensorDataset.from_records(sf.make_record(f"w{i}", 400 + i, Profile.WILD, resolution=res) for i in range(64))
held = TensorDataset.from_records(sf.make_record(f"h{i}", 500 + i, Profile.WILD, resolution=res) for i in range(16))

inv = train_stage1(TrainConfig(direction="rgb2x", steps=600, lr=1e-3), ann)
fwd = train_stage1(TrainConfig(direction="x2rgb", steps=600, lr=1e-3), ann)
before = cycle_errors(inv, fwd, held.rgb)

inv, fwd = train_cycle(TrainConfig(direction="joint", steps=600, batch_size=2, lr=3e-4, lambda_cyc=1.0), inv, fwd,
                       annotated=ann, wild=wild)
after = cycle_errors(inv, fwd, held.rgb)
sources = [row["source"] for row in inv.log]
print(f"joint steps: {sources.count('annotated')} annotated batches, {sources.count('wild')} wild batches")
print(f"held-out wild cycle error: {before.mean():.4f} -> {after.mean():.4f} "
      f"(improved on {(after < before).sum()}/{len(held)})")
