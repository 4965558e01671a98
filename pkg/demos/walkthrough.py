"""Tour of the pipeline on a small synthetic dataset.

Generates scenes, shows what the nominators pick for one test scene,
trains a few epochs, and compares mAP before and after.

    python3 demos/walkthrough.py
"""

import numpy as np

from topdown_hoi.data import generate_dataset
from topdown_hoi.nominators import nominate
from topdown_hoi.semantics import over_matrix
from topdown_hoi.train import RunConfig, build_model, evaluate, run_training


def show_nominations(ds, cfg, index=0):
    scene = ds.test[index]
    noms = nominate(ds.objects, ds.actions, over_matrix(ds.objects, ds.actions), scene.v_c,
                    cfg.k_o, cfg.k_a, cfg.k, ds.taxonomy.person_object_idx)
    print(f"test scene {index} ground truth:",
          sorted(ds.taxonomy.class_name(c) for c in scene.classes()))
    print("  nominated objects:", [ds.objects.names[i] for i in noms.objects.indices])
    print("  nominated verbs:  ", [ds.actions.names[i] for i in noms.actions.indices])


def main():
    cfg = RunConfig.toy(n_train=80, n_test=40, epochs=8)
    ds = generate_dataset(cfg.data_config())
    print(f"{ds.taxonomy.n_classes} classes, {len(ds.split.seen)} seen / {len(ds.split.unseen)} unseen "
          f"({ds.split.setting})")
    show_nominations(ds, cfg)

    before = evaluate(build_model(ds, cfg), ds.test, ds.split, cfg.top_n)

    def log(ev):
        if ev.get("event") == "epoch":
            print(f"  epoch {ev['epoch']:2d}  loss {ev['loss']:.4f}")

    model, _ = run_training(ds, ds.split, cfg, log=log)
    after = evaluate(model, ds.test, ds.split, cfg.top_n)
    for name, rep in (("untrained", before), ("trained", after)):
        print(f"{name:>9}: full {rep.map_full:.4f}  seen {rep.map_seen:.4f}  unseen {rep.map_unseen:.4f}")

    _, tr = model.forward(ds.test[0], range(ds.taxonomy.n_classes), mode="eval", trace=True)
    fused = tr.f_o.map.data
    gh, gw = cfg.stack_config().grid
    print("object co-attention energy per grid cell (scene 0):")
    print(np.round(np.abs(fused).mean(axis=0).reshape(gh, gw), 2))


if __name__ == "__main__":
    main()
