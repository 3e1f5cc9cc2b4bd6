"""Each method with and without l2-normalised embeddings before clustering."""
from _common import parser, run

METHODS = ["simsiam_v1", "byol", "mocov2", "pbcnet"]

if __name__ == "__main__":
    args = parser(__doc__, "runs/normalization").parse_args()
    run(args, [(f"{m}{'' if norm else '_raw'}", m, {"normalize": norm}) for m in METHODS for norm in (True, False)])
