"""Self-supervised methods side by side on the synthetic set."""
from _common import parser, run

METHODS = ["triplet", "simsiam_v0", "simsiam_v1", "byol", "mocov2", "pbcnet"]

if __name__ == "__main__":
    args = parser(__doc__, "runs/methods").parse_args()
    run(args, [(m, m, {}) for m in METHODS])
