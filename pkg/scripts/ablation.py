"""Ablate the attention path, the camera loss site and augmentation on the synthetic dataset.

    python3 scripts/ablation.py --root runs/ablation --epochs 40
"""

import argparse
import os

from vmrfanet.experiment import SyntheticSetup, config_for, prepare_data, run_one

VARIANTS = {
    "full": (True, {}),
    "no_attention": (False, {}),
    "attention_no_camera": (True, {"loss.lambda3": "0"}),
    "camera_at_backbone": (True, {"net.camera_loss_site": "backbone_pre_mask"}),
    "no_hda": (True, {"hda.apply_prob": "0"}),
    "no_triplet": (True, {"loss.lambda1": "0", "loss.lambda2": "0"}),
}


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--root", default="runs/ablation")
    ap.add_argument("--epochs", type=int, default=SyntheticSetup().epochs)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--only", nargs="*", choices=sorted(VARIANTS), help="run a subset of variants")
    args = ap.parse_args()

    setup = SyntheticSetup(epochs=args.epochs, seed=args.seed)
    os.makedirs(args.root, exist_ok=True)
    train, query, gallery = prepare_data(setup, args.root)
    rows = ["variant,rank1,map,camera_accuracy,loss_ratio,seconds"]
    for name in args.only or VARIANTS:
        attention, over = VARIANTS[name]
        r = run_one(name, config_for(setup, attention, over), train, query, gallery)
        print(r.summary(), flush=True)
        ratio = r.loss_ratio(30)
        rows.append(f"{name},{r.rank1:.4f},{r.map:.4f},{r.camera_accuracy:.4f},{ratio:.4f},{r.seconds:.1f}")
    with open(os.path.join(args.root, "ablation.csv"), "w") as fh:
        fh.write("\n".join(rows) + "\n")


if __name__ == "__main__":
    main()
