"""
Teacher, student and masked evaluation end to end
=================================================

Runs the whole command-line workflow on a small synthetic corpus: train an
unmasked teacher, distil a student that sees masked faces, then score a
masked-probe protocol with both models.  Takes a couple of minutes on one CPU.
"""

import sys
import tempfile
from pathlib import Path

from maskdistill.cli import run
from maskdistill.toydata import write_toy_dataset, write_toy_pairs

work = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(tempfile.mkdtemp())
print("working in", work)

# twenty identities to train on, ten unseen identities for the pair protocol
train_set = write_toy_dataset(work / "train", 20, 20, seed=0)
held_out = write_toy_dataset(work / "held", 10, 10, seed=0, stream="toy-heldout")

# one config file shared by both training runs; the teacher ignores the lambda switch
(work / "toy.cfg").write_text("""\
batch_size = 32
total_iterations = 400
lr_milestones = [300, 350]
lambda_switch_iteration = 250
backbone_width = 8
embedding_dim = 64
scale = 32
margin = 0.3
sigma = 0.05
""")


def cli(*argv):
    print("$ maskdistill", " ".join(argv))
    status = run(list(argv))
    if status != 0:
        raise SystemExit(status)


cli("train-teacher", "--data", str(train_set.root), "--config", str(work / "toy.cfg"),
    "--run-dir", str(work / "teacher"))

# the student copies the teacher embedding on unmasked inputs while half its batch is masked
cli("train-student", "--data", str(train_set.root), "--config", str(work / "toy.cfg"),
    "--paradigm", "HG", "--teacher", str(work / "teacher" / "teacher.pt"),
    "--run-dir", str(work / "student"))

# the loss log shows the distillation weight stepping up at the switch
# (line k + 1 holds iteration k)
rows = (work / "student" / "loss_log.csv").read_text().splitlines()
print(rows[0])
print(rows[250])
print(rows[251])

# masked probe against unmasked reference, split into 5 folds
pairs = write_toy_pairs(work / "held" / "pairs.txt", held_out, 150, 150, seed=0, per_fold=30)
cli("protocol", "--pairs", str(pairs), "--scenario", "masked-vs-nonmasked", "--folds", "5",
    "--run-dir", str(work / "protocol"))

for name, model in [("teacher", work / "teacher" / "teacher.pt"),
                    ("student", work / "student" / "student.pt")]:
    cli("evaluate", "--protocol", str(work / "protocol" / "protocol.tsv"), "--model", str(model),
        "--run-dir", str(work / ("eval-" + name)))
