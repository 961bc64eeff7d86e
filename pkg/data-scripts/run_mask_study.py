import os
import sys

from dotenv import load_dotenv

sys.path.insert(0, os.path.join(os.path.dirname(__file__), ".."))

from data import SyntheticSceneConfig, load_dataset, synth_generate  # noqa: E402
from harness import dataset_windows, mask_study, mask_study_verdict  # noqa: E402
from learn import TrainConfig, infer_masks, train, write_loss_history  # noqa: E402
from vision import FastBriefDetector  # noqa: E402

# Load environment variables
load_dotenv()

ROOT = os.path.join(os.path.dirname(__file__), "..")


def prepare_dataset(out_dir):
    """Generate the 128x128 study scene unless it already exists.

    FAST+BRIEF drops keypoints within 16 px of the border, so the 64x64 accuracy fixture leaves
    too little of the frame for this study.
    """
    manifest = os.path.join(out_dir, "manifest.json")
    if os.path.exists(manifest):
        print(f"Reusing dataset at {out_dir}")
        return manifest
    scene = SyntheticSceneConfig.load(os.path.join(ROOT, "fixtures", "mask_study.json"))
    return synth_generate(scene, out_dir)


def run_study():
    out_dir = os.getenv("ATTENTIVO_STUDY_DIR", os.path.join(ROOT, "study"))
    epochs = int(os.getenv("ATTENTIVO_STUDY_EPOCHS", "200"))
    seeds = [int(s) for s in os.getenv("ATTENTIVO_STUDY_SEEDS", "0,1,2,3,4").split(",")]
    rho = float(os.getenv("ATTENTIVO_MASK_RHO", "0.51"))

    dataset = load_dataset(prepare_dataset(os.path.join(out_dir, "dataset")))
    train_config = TrainConfig(epochs=epochs, mask_rho=rho)
    result = train(train_config, dataset_windows(dataset, train_config.window_size))
    write_loss_history(os.path.join(out_dir, "loss.csv"), result.history)
    print(f"Loss {result.history[0]:.5f} -> {result.history[-1]:.5f} over {epochs} epochs")

    masks, _ = infer_masks(result.model, dataset.images, rho)
    table = mask_study(dataset, FastBriefDetector(threshold=20), masks, seeds)
    table.to_csv(os.path.join(out_dir, "mask_study.csv"), index=False)

    print("\n=== Masked vs unmasked VO ===")
    print(table.to_string(index=False))
    print("\n=== Verdict ===")
    for key, value in mask_study_verdict(table).items():
        print(f"{key}: {value}")


if __name__ == "__main__":
    run_study()
