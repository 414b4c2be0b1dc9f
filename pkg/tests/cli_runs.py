"""Small configurations of every CLI subcommand, shared by the CLI and acceptance tests."""

SMALL_RUNS = {
    "converge": ["converge", "--p", "8", "--r", "4", "--T", "1", "--steps", "64", "--h-coarsest", "4",
                 "--h-levels", "3", "--realizations", "4"],
    "train": ["train", "--mode", "random", "--p", "8", "--r", "4", "--n-data", "20", "--iters", "5", "--steps", "8",
              "--pieces", "4", "--boundary-grid", "5"],
    "transport-demo": ["transport", "--N", "30", "--grid", "20", "--steps", "16", "--p", "8", "--r", "4",
                       "--snapshots", "2", "--fm-pairs", "20", "--fm-iters", "10", "--h-coarsest", "4",
                       "--realizations", "2"],
    "transport-rate": ["transport", "--task", "rate", "--N", "30", "--grid", "20", "--steps", "32", "--p", "8",
                       "--r", "4", "--h-coarsest", "4", "--h-levels", "3", "--realizations", "2", "--fm-pairs", "20",
                       "--fm-iters", "10"],
    "design": ["design", "--p", "4", "--schemes", "single,pick_one,balanced:2,bernoulli:0.5", "--steps", "20"],
    "cost": ["cost", "--eps", "0.1", "--p", "4", "--steps", "20", "--execute"],
    "dataset": ["dataset", "--n-data", "10"],
    "gap": ["gap", "--p", "4", "--n-data", "5", "--steps", "8", "--r", "2", "--h-divs", "2,4,8", "--iters", "5",
            "--seeds", "0,1"],
}
