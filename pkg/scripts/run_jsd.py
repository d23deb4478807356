"""Mean row JSD of candidate affinity matrices against each domain's taxonomy."""

import argparse

from semsearch.affinity import ground_truth_matrix, jsd_score, uniform_matrix
from semsearch.providers import AffinityProviderSpec, build_affinity
from semsearch.taxonomy import load_taxonomy


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--domains", nargs="+", default=["pharmacy", "kitchen", "office"])
    ap.add_argument("--seeds", type=int, default=5, help="scripted-scorer seeds to average")
    args = ap.parse_args()
    print("domain,matrix,mean_jsd,improvement")
    for domain in args.domains:
        tax = load_taxonomy(domain)
        labels = tax.labels()
        truth = ground_truth_matrix(tax.categories(), labels)
        cands = {"uniform": uniform_matrix(labels)}
        for s in range(args.seeds):
            cands[f"scripted-{s}"] = build_affinity(AffinityProviderSpec("scripted", seed=s), labels)
        for name, m in cands.items():
            jsd, imp = jsd_score(m, truth)
            print(f"{domain},{name},{jsd:.4f},{imp:.3f}")


if __name__ == "__main__":
    main()
