"""
Command-line pipeline: preprocess, train, score, eval, synth.

Exit codes: 0 success, 1 I/O failure, 2 invalid input or flags. Logs go to
standard error; data goes to files (or standard output where noted).

List files (enrollment and test) have one ``side_id<TAB>embedding_id`` pair
per line; repeated side ids are summed as multi-session sides. A line with a
single column uses the embedding as its own side. Key files have lines
``enroll_id<TAB>test_id<TAB>target|nontarget``.
"""

import argparse
import json
import logging
import os
import sys

import numpy as np

from . import data, metrics, model as tmodel, scoring, train

log = logging.getLogger("tpsda")


class UsageError(Exception):
    pass


def _dims(text):
    try:
        dims = tuple(int(x) for x in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad dimension list {text!r}") from None
    if not dims or min(dims) < 1:
        raise argparse.ArgumentTypeError("dimensions must be positive integers")
    return dims


def read_side_list(path):
    """Ordered mapping side_id -> list of embedding ids."""
    sides = {}
    with open(path) as f:
        for ln, line in enumerate(f, 1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) > 2:
                raise UsageError(f"{path}:{ln}: expected side_id<TAB>embedding_id")
            sid, eid = (parts[0], parts[0]) if len(parts) == 1 else parts
            sides.setdefault(sid, []).append(eid)
    return sides


def read_key(path):
    trials = []
    with open(path) as f:
        for ln, line in enumerate(f, 1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) not in (2, 3):
                raise UsageError(f"{path}:{ln}: expected enroll<TAB>test[<TAB>target|nontarget]")
            lab = None
            if len(parts) == 3:
                if parts[2] not in ("target", "nontarget"):
                    raise UsageError(f"{path}:{ln}: label must be target or nontarget")
                lab = parts[2] == "target"
            trials.append((parts[0], parts[1], lab))
    return trials


def _load_set(path, labels=None):
    try:
        return data.load_any(path, labels)
    except (ValueError, KeyError) as e:
        raise UsageError(str(e)) from None


def cmd_preprocess(args):
    train_set = _load_set(args.embeddings, args.labels)
    if args.lda is not None:
        if train_set.labels is None:
            raise UsageError("--lda needs speaker labels")
        bound = min(train_set.dim, len(set(train_set.labels)) - 1)
        if not 1 <= args.lda <= bound:
            raise UsageError(f"--lda {args.lda} exceeds the rank bound {bound} for D={train_set.dim}")
    prep = data.fit_preprocessor(train_set, args.lda)
    out = data.apply_preprocessor(prep, train_set)
    prep.save(args.out_prep)
    data.save_embeddings(out, args.out_embeddings)
    log.info("preprocessed %d embeddings: D=%d -> %d", len(out), train_set.dim, out.dim)


def cmd_apply(args):
    prep = data.Preprocessor.load(args.prep)
    es = _load_set(args.embeddings, args.labels)
    if es.dim != prep.mean.size:
        raise UsageError(f"preprocessor expects D={prep.mean.size}, got {es.dim}")
    data.save_embeddings(data.apply_preprocessor(prep, es), args.out)


def cmd_train(args):
    es = _load_set(args.embeddings, args.labels)
    if es.labels is None:
        raise UsageError("training embeddings need speaker labels")
    structure = tmodel.ModelStructure(es.dim, args.dims, args.speaker_factors)
    errs = tmodel.validate(structure, es.dim)
    if errs:
        raise UsageError("; ".join(errs))
    config = train.EmConfig(iterations=args.iters, wf_inner_iterations=args.wf_iters,
                            seed=args.seed, learn_priors=args.learn_priors,
                            convergence_tol=args.tol, threads=args.threads)
    log_file = open(args.log, "w") if args.log else sys.stderr
    try:
        result = train.fit(es.X, es.labels, structure, config, log_file=log_file)
    finally:
        if args.log:
            log_file.close()
    if result.violations:
        log.warning("log-likelihood decreased at iterations %s", result.violations)
    result.model.save(args.out_model)
    log.info("trained model: kappa=%.6g w=%s", result.model.kappa, np.round(result.model.w, 4))


def _summaries(model, es, sides):
    try:
        return [scoring.summarize_side(es.rows(ids), model) for ids in sides.values()]
    except KeyError as e:
        raise UsageError(str(e)) from None


def cmd_score(args):
    mdl = tmodel.TPsdaModel.load(args.model)
    es = _load_set(args.embeddings)
    if es.dim != mdl.D:
        raise UsageError(f"embeddings have D={es.dim}, model expects {mdl.D}")
    enroll = read_side_list(args.enroll)
    test = read_side_list(args.test)
    trials = read_key(args.trials) if args.trials else None
    cohort = None
    if args.snorm:
        cohort = _load_set(args.snorm)
        if cohort.dim != mdl.D:
            raise UsageError("cohort dimension does not match the model")
        if args.cohort_size is not None:
            cohort = cohort.subset(metrics.select_cohort(len(cohort), args.cohort_size, args.cohort_seed))
        if args.top_k > len(cohort):
            raise UsageError(f"--top-k {args.top_k} exceeds the cohort size {len(cohort)}")

    exact = not args.approx
    es_sides = _summaries(mdl, es, enroll)
    ts_sides = _summaries(mdl, es, test)
    ts = scoring.score_matrix(mdl, es_sides, ts_sides, exact=exact, threads=args.threads)
    if cohort is not None:
        cs = [scoring.summarize_side(x, mdl) for x in cohort.X]
        ec = scoring.score_matrix(mdl, es_sides, cs, exact=exact, threads=args.threads).scores
        tc = scoring.score_matrix(mdl, ts_sides, cs, exact=exact, threads=args.threads).scores
        ts.scores = metrics.adaptive_snorm(ts.scores, ec, tc, args.top_k)
    ts.enroll_ids, ts.test_ids = list(enroll), list(test)
    if trials is not None:
        ei = {k: i for i, k in enumerate(enroll)}
        ti = {k: j for j, k in enumerate(test)}
        mask = np.zeros_like(ts.mask)
        for e, t, _ in trials:
            if e not in ei or t not in ti:
                raise UsageError(f"trial ({e}, {t}) refers to an unknown side")
            mask[ei[e], ti[t]] = True
        ts.mask = mask
    if args.binary:
        ts.write_binary(args.out_scores)
    elif args.out_scores == "-":
        ts.write_text(sys.stdout)
    else:
        ts.write_text(args.out_scores)


def cmd_eval(args):
    ts = scoring.TrialScores.read_text(args.scores)
    key = read_key(args.key)
    ei = {k: i for i, k in enumerate(ts.enroll_ids)}
    ti = {k: j for j, k in enumerate(ts.test_ids)}
    s, lab = [], []
    for e, t, target in key:
        if target is None:
            raise UsageError("key file needs target/nontarget labels")
        if e not in ei or t not in ti or not ts.mask[ei[e], ti[t]]:
            raise UsageError(f"no score for trial ({e}, {t})")
        s.append(ts.scores[ei[e], ti[t]])
        lab.append(target)
    params = metrics.DetectionCostParams(args.p_target, args.c_miss, args.c_fa)
    try:
        rep = metrics.report(s, lab, params)
    except ValueError as e:
        raise UsageError(str(e)) from None
    print(metrics.format_report(rep))
    if args.json:
        with open(args.json, "w") as f:
            json.dump(rep, f, indent=2, sort_keys=True)


def cmd_synth(args):
    mdl = tmodel.TPsdaModel.load(args.model)
    if args.speakers < 1 or args.per_speaker < 1:
        raise UsageError("--speakers and --per-speaker must be >= 1")
    es = data.synth_generate(mdl, args.speakers, args.per_speaker, args.seed)
    data.save_embeddings(es, args.out)


def cmd_random_model(args):
    structure = tmodel.ModelStructure(args.dim, args.dims, args.speaker_factors)
    errs = tmodel.validate(structure)
    if errs:
        raise UsageError("; ".join(errs))
    if not args.kappa > 0:
        raise UsageError("--kappa must be > 0")
    gamma = np.zeros(structure.n)
    gamma[: structure.m] = args.speaker_gamma
    gamma[structure.m:] = args.channel_gamma
    mdl = tmodel.random_model(structure, args.kappa, seed=args.seed, gamma=gamma)
    mdl.save(args.out)


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-v", "--verbose", action="count", default=0)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--threads", type=int, default=os.cpu_count() or 1)
    p = argparse.ArgumentParser(prog="tpsda", description="Toroidal PSDA speaker verification back-end")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, func, help):
        sp = sub.add_parser(name, help=help, parents=[common])
        sp.set_defaults(func=func)
        return sp

    sp = add("preprocess", cmd_preprocess, "fit centering (+LDA) and length-normalize a training set")
    sp.add_argument("embeddings")
    sp.add_argument("out_prep")
    sp.add_argument("out_embeddings")
    sp.add_argument("--lda", type=int, metavar="DIM")
    sp.add_argument("--labels", help="id<TAB>speaker file for plain-text embeddings")

    sp = add("apply", cmd_apply, "apply a fitted preprocessor to another embedding set")
    sp.add_argument("prep")
    sp.add_argument("embeddings")
    sp.add_argument("out")
    sp.add_argument("--labels")

    sp = add("train", cmd_train, "train a T-PSDA model by EM")
    sp.add_argument("embeddings")
    sp.add_argument("out_model")
    sp.add_argument("--dims", type=_dims, required=True, help="comma-separated factor dimensions, e.g. 60,5,5")
    sp.add_argument("--speaker-factors", type=int, default=1)
    sp.add_argument("--learn-priors", action="store_true")
    sp.add_argument("--iters", type=int, default=200)
    sp.add_argument("--wf-iters", type=int, default=5)
    sp.add_argument("--tol", type=float, default=1e-7)
    sp.add_argument("--log", help="per-iteration training log (default: stderr)")
    sp.add_argument("--labels")

    sp = add("score", cmd_score, "score enrollment sides against test sides")
    sp.add_argument("model")
    sp.add_argument("embeddings")
    sp.add_argument("enroll")
    sp.add_argument("test")
    sp.add_argument("out_scores", help="output file, or - for standard output")
    sp.add_argument("--trials", help="restrict output to the trials in this list/key file")
    sp.add_argument("--approx", action="store_true", help="fast approximate score")
    sp.add_argument("--snorm", metavar="COHORT", help="cohort embeddings for adaptive S-norm")
    sp.add_argument("--top-k", type=int, default=400)
    sp.add_argument("--cohort-size", type=int, help="random subset of the cohort file, e.g. 5000")
    sp.add_argument("--cohort-seed", type=int, default=0)
    sp.add_argument("--binary", action="store_true", help="write the TPSC01 binary matrix instead of text")

    sp = add("eval", cmd_eval, "EER and minimum detection cost")
    sp.add_argument("scores")
    sp.add_argument("key")
    sp.add_argument("--p-target", type=float, default=0.05)
    sp.add_argument("--c-miss", type=float, default=1.0)
    sp.add_argument("--c-fa", type=float, default=1.0)
    sp.add_argument("--json", help="also write the report as JSON")

    sp = add("synth", cmd_synth, "sample a labelled synthetic set from a model")
    sp.add_argument("model")
    sp.add_argument("out")
    sp.add_argument("--speakers", type=int, required=True)
    sp.add_argument("--per-speaker", type=int, required=True)

    sp = add("random-model", cmd_random_model, "write a model with random loadings (for synthetic data)")
    sp.add_argument("out")
    sp.add_argument("--dim", type=int, required=True)
    sp.add_argument("--dims", type=_dims, required=True)
    sp.add_argument("--speaker-factors", type=int, default=1)
    sp.add_argument("--kappa", type=float, required=True)
    sp.add_argument("--speaker-gamma", type=float, default=0.0)
    sp.add_argument("--channel-gamma", type=float, default=0.0)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    if args.threads < 1:
        parser.error("--threads must be >= 1")
    try:
        args.func(args)
    except (UsageError, ValueError) as e:
        log.error("%s", e)
        return 2
    except OSError as e:
        log.error("%s", e)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
