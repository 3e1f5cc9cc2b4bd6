"""Full four-way slicing against the top/bottom-only and left/right-only variants."""
from _common import parser, run

METHODS = ["pbcnet", "pbcnet_horiz", "pbcnet_vert"]

if __name__ == "__main__":
    args = parser(__doc__, "runs/slicing").parse_args()
    run(args, [(m, m, {}) for m in METHODS])
