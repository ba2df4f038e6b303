#!/usr/bin/env python3
"""
Command-line entry point for the layout prior workflow.

    gen-data   synthesize (or distill through mock providers) a dataset
    import     validate and canonicalize an external JSONL dataset
    split      seeded train/test split
    train      fit the score network
    sample     draw goal layouts with the probability-flow ODE
    baseline   rand-no-coll / filter-rejection / llm-direct goal layouts
    eval       coverage and marginal KL
    plan       pick-and-place plan from an initial to a goal scene
    simulate   replay a plan and check it reaches the goal
    rearrange  sample a goal for a scene, plan and simulate
    plot       render a scene, plan or KDE grid as SVG

Every stochastic command takes a mandatory --seed. A key-value file given
with --config (before the command) supplies defaults for the command's
flags; flags on the command line win.

Exit codes: 0 success, 2 usage error, 3 data or planning error, 4 numerical
failure. Failures print one line to stderr:

    error kind=<data|numerical|planning> [file=<path>] [line=<n>] msg=<text>
"""

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

from layout_model import (
    DOMAINS,
    ArrangementExample,
    DataError,
    Dataset,
    Layout,
    LayoutPriorError,
    NumericalError,
    PlanningError,
    load_vocab,
    overlapping_pairs,
    read_dataset,
    read_scene,
    vocab_for_domain,
    write_scene,
)
from generate_data import GeneratorConfig, export_examples, import_examples, split_dataset, synth_generate
from distill_pipeline import default_prompt, run_pipeline
from score_network import ScoreNetConfig, load_checkpoint
from diffusion import SamplerConfig, TrainConfig, estimate_sigma_data, sample, sample_dataset, train
from baselines import METHODS, generate_baseline
from evaluate_layouts import (
    KdeConfig,
    PairSpec,
    evaluate_coverage,
    evaluate_marginal_kl,
    read_kde_grid,
    write_report,
)
from plan_rearrangement import PlannerConfig, plan, read_plan, simulate, write_plan
from render_svg import OVERLAYS, RenderSpec, render_kde, render_layout, render_plan, svg_to_png, write_svg

logger = logging.getLogger('layoutprior')

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_NUMERICAL = 4

SEEDED_COMMANDS = ('gen-data', 'split', 'train', 'sample', 'baseline', 'rearrange')


def load_config(path: Path) -> dict[str, str]:
    """
    Parse a 'key = value' file. Blank lines and '#' comments are ignored;
    keys are flag names without leading dashes.
    """
    path = Path(path)
    if not path.exists():
        raise DataError("Config file not found", path=path)
    values = {}
    with open(path) as f:
        for lineno, raw in enumerate(f, start=1):
            text = raw.split('#', 1)[0].strip()
            if not text:
                continue
            key, sep, value = text.partition('=')
            if not sep or not key.strip():
                raise DataError(f"Expected 'key = value', got {raw.strip()!r}", path=path, line=lineno)
            values[key.strip().lstrip('-').replace('-', '_')] = value.strip()
    return values


def _parse_bool(text: str, key: str) -> bool:
    lowered = text.lower()
    if lowered in ('1', 'true', 'yes', 'on'):
        return True
    if lowered in ('0', 'false', 'no', 'off'):
        return False
    raise DataError(f"Config key '{key}' expects a boolean, got {text!r}")


def apply_config(subparser: argparse.ArgumentParser, values: dict[str, str]) -> None:
    """Install config values as the subcommand's defaults (argparse converts strings)."""
    actions = {a.dest: a for a in subparser._actions}
    defaults = {}
    for key, value in values.items():
        action = actions.get(key)
        if action is None or key == 'help':
            raise DataError(f"Unknown config key '{key}' for command '{subparser.prog.split()[-1]}'")
        if isinstance(action, (argparse._StoreTrueAction, argparse._StoreFalseAction)):
            defaults[key] = _parse_bool(value, key)
        elif isinstance(action, argparse._AppendAction):
            defaults[key] = [v.strip() for v in value.split(',') if v.strip()]
        else:
            defaults[key] = value
    subparser.set_defaults(**defaults)


def _add_sampler_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument('--method', choices=['rk45', 'euler'], default='rk45', help='ODE solver (default: rk45)')
    p.add_argument('--atol', type=float, default=1e-5, help='RK45 absolute tolerance (default: 1e-5)')
    p.add_argument('--rtol', type=float, default=1e-5, help='RK45 relative tolerance (default: 1e-5)')
    p.add_argument('--euler-steps', type=int, default=500, help='Euler step count (default: 500)')
    p.add_argument('--t-floor', type=float, default=1e-3, help='Terminal time of the ODE (default: 1e-3)')


def build_parser() -> tuple[argparse.ArgumentParser, dict[str, argparse.ArgumentParser]]:
    parser = argparse.ArgumentParser(
        prog='layoutprior',
        description='Learn, sample, evaluate and execute functional tabletop layouts'
    )
    parser.add_argument('--config', type=Path, help='Key-value file with defaults for the command flags')
    parser.add_argument('--verbose', '-v', action='store_true', help='Debug logging')
    parser.add_argument('--quiet', '-q', action='store_true', help='Warnings and errors only')
    subparsers = parser.add_subparsers(dest='command', help='Commands')
    commands = {}

    p = subparsers.add_parser('gen-data', help='Generate a dataset')
    p.add_argument('--domain', choices=list(DOMAINS), help='Domain tag')
    p.add_argument('--count', type=int, default=100, help='Number of examples (default: 100)')
    p.add_argument('--jitter', type=float, default=0.02, help='Template jitter std (default: 0.02)')
    p.add_argument('--dropout', type=float, default=0.0, help='Optional-object dropout (default: 0)')
    p.add_argument('--seed', type=int, help='Random seed (required)')
    p.add_argument('--vocab', type=Path, help='Vocab JSON (default: the domain vocab)')
    p.add_argument('--pipeline', action='store_true', help='Distill through the mock image pipeline')
    p.add_argument('--no-refine', action='store_true', help='Pipeline without the refinement stage')
    p.add_argument('--out', '-o', type=Path, help='Output JSONL path')
    commands['gen-data'] = p

    p = subparsers.add_parser('import', help='Import an external JSONL dataset')
    p.add_argument('input', type=Path, help='JSONL file')
    p.add_argument('--domain', choices=list(DOMAINS), help='Domain whose vocab validates the file')
    p.add_argument('--vocab', type=Path, help='Vocab JSON (overrides --domain)')
    p.add_argument('--out', '-o', type=Path, help='Output JSONL path')
    commands['import'] = p

    p = subparsers.add_parser('split', help='Seeded train/test split')
    p.add_argument('--data', type=Path, help='Dataset JSONL')
    p.add_argument('--test-count', type=int, help='Held-out examples')
    p.add_argument('--seed', type=int, help='Random seed (required)')
    p.add_argument('--train-out', type=Path, help='Train JSONL path')
    p.add_argument('--test-out', type=Path, help='Test JSONL path')
    commands['split'] = p

    p = subparsers.add_parser('train', help='Train the score network')
    p.add_argument('--data', type=Path, help='Training dataset JSONL')
    p.add_argument('--out', '-o', type=Path, help='Checkpoint path')
    p.add_argument('--steps', type=int, default=5000, help='Optimizer steps (default: 5000)')
    p.add_argument('--batch-size', type=int, default=16, help='Scenes per batch (default: 16)')
    p.add_argument('--lr', type=float, default=2e-4, help='Adam learning rate (default: 2e-4)')
    p.add_argument('--loss-weight', choices=['sigma2', 'one'], default='sigma2', help='lambda(t) (default: sigma2)')
    p.add_argument('--t-floor', type=float, default=1e-3, help='Minimum diffusion time (default: 1e-3)')
    p.add_argument('--hidden', type=int, default=128, help='Hidden width (default: 128)')
    p.add_argument('--embed', type=int, default=64, help='Time embedding size (default: 64)')
    p.add_argument('--activation', choices=['silu', 'relu'], default='silu')
    p.add_argument('--aggregation', choices=['max', 'mean'], default='max')
    p.add_argument('--sigma-data', type=float,
                   help='Data scale for input/output preconditioning (default: estimated from --data)')
    p.add_argument('--checkpoint-every', type=int, default=0, help='Save every N steps (default: only at the end)')
    p.add_argument('--loss-csv', type=Path, help='Write step,loss records here')
    p.add_argument('--seed', type=int, help='Random seed (required)')
    commands['train'] = p

    p = subparsers.add_parser('sample', help='Sample goal layouts')
    p.add_argument('--ckpt', type=Path, help='Checkpoint path')
    p.add_argument('--conditions', type=Path, help='Scene JSON whose objects condition the sample')
    p.add_argument('--data', type=Path, help='Dataset JSONL; sample for every scene')
    p.add_argument('--num-samples', type=int, default=1, help='Samples per scene (default: 1)')
    p.add_argument('--seed', type=int, help='Random seed (required)')
    p.add_argument('--out', '-o', type=Path, help='Output (.json scene or .jsonl dataset; default: stdout)')
    _add_sampler_flags(p)
    commands['sample'] = p

    p = subparsers.add_parser('baseline', help='Baseline goal layouts for a dataset')
    p.add_argument('--method', choices=list(METHODS), default='rand-no-coll')
    p.add_argument('--data', type=Path, help='Reference dataset JSONL')
    p.add_argument('--samples-per-scene', type=int, default=1)
    p.add_argument('--seed', type=int, help='Random seed (required)')
    p.add_argument('--out', '-o', type=Path, help='Output JSONL path')
    commands['baseline'] = p

    p = subparsers.add_parser('eval', help='Evaluate generated layouts')
    p.add_argument('--metric', choices=['coverage', 'marginal-kl', 'all'], default='all')
    p.add_argument('--gen', type=Path, help='Generated dataset JSONL')
    p.add_argument('--gt', type=Path, help='Ground-truth dataset JSONL')
    p.add_argument('--pair', action='append', help='Category pair anchor:target (repeatable)')
    p.add_argument('--resolution', type=int, default=64, help='KDE grid resolution (default: 64)')
    p.add_argument('--bandwidth', type=float, nargs=2, metavar=('HX', 'HY'), help='Fixed KDE bandwidths')
    p.add_argument('--report', type=Path, help='CSV report path')
    p.add_argument('--dump-kde', type=Path, help='Directory for KDE grid JSON dumps')
    commands['eval'] = p

    p = subparsers.add_parser('plan', help='Plan a rearrangement')
    p.add_argument('--initial', type=Path, help='Initial scene JSON')
    p.add_argument('--goal', type=Path, help='Goal scene JSON')
    p.add_argument('--margin-mm', type=float, default=5.0, help='Clearance for move-away checks (default: 5)')
    p.add_argument('--out', '-o', type=Path, help='Plan JSON path (default: stdout)')
    commands['plan'] = p

    p = subparsers.add_parser('simulate', help='Replay a plan')
    p.add_argument('--plan', type=Path, help='Plan JSON')
    p.add_argument('--initial', type=Path, help='Initial scene JSON')
    p.add_argument('--goal', type=Path, help='Goal scene JSON to compare against')
    commands['simulate'] = p

    p = subparsers.add_parser('rearrange', help='Sample a goal, plan and simulate')
    p.add_argument('--ckpt', type=Path, help='Checkpoint path')
    p.add_argument('--initial', type=Path, help='Initial scene JSON')
    p.add_argument('--candidates', type=int, default=8, help='Goal samples tried for an overlap-free one')
    p.add_argument('--margin-mm', type=float, default=5.0)
    p.add_argument('--seed', type=int, help='Random seed (required)')
    p.add_argument('--goal-out', type=Path, help='Write the chosen goal scene here')
    p.add_argument('--plan-out', type=Path, help='Write the plan here')
    _add_sampler_flags(p)
    commands['rearrange'] = p

    p = subparsers.add_parser('plot', help='Render a scene, plan or KDE grid as SVG')
    p.add_argument('input', type=Path, help='Scene JSON, plan JSON or KDE grid JSON')
    p.add_argument('--mode', default='layout', help=f"Overlay mode: {', '.join(OVERLAYS)}")
    p.add_argument('--scene', type=Path, help='Initial scene for plan-arrows mode')
    p.add_argument('--canvas', type=int, default=512, help='Canvas width in pixels (default: 512)')
    p.add_argument('--color', action='append', help='category=#rrggbb (repeatable)')
    p.add_argument('--out', '-o', type=Path, help='SVG path')
    p.add_argument('--png', type=Path, help='Also rasterize to this PNG (needs cairosvg)')
    commands['plot'] = p

    return parser, commands


REQUIRED = {
    'gen-data': ('domain', 'out'),
    'import': ('out',),
    'split': ('data', 'test_count', 'train_out', 'test_out'),
    'train': ('data', 'out'),
    'sample': ('ckpt',),
    'baseline': ('data', 'out'),
    'eval': ('gen', 'gt'),
    'plan': ('initial', 'goal'),
    'simulate': ('plan', 'initial'),
    'rearrange': ('ckpt', 'initial'),
    'plot': ('out',),
}


def _check_required(parser: argparse.ArgumentParser, args) -> None:
    missing = [f"--{name.replace('_', '-')}" for name in REQUIRED.get(args.command, ())
               if getattr(args, name) is None]
    if args.command in SEEDED_COMMANDS and args.seed is None:
        missing.append('--seed')
    if missing:
        parser.error(f"{args.command}: missing required {', '.join(missing)}")
    if args.command == 'gen-data' and args.count < 1:
        parser.error(f"--count must be >= 1, got {args.count}")


def _status(message: str) -> None:
    print(message, file=sys.stderr)


def _progress(args) -> bool:
    return not args.quiet and sys.stderr.isatty()


def cmd_gen_data(args) -> int:
    vocab = load_vocab(args.vocab) if args.vocab else vocab_for_domain(args.domain)
    if args.pipeline:
        dataset = run_pipeline(default_prompt(args.domain), args.domain, vocab, args.count, args.seed,
                               refine=not args.no_refine)
    else:
        cfg = GeneratorConfig(args.domain, jitter_std=args.jitter, seed=args.seed,
                              count=args.count, dropout=args.dropout)
        dataset = synth_generate(cfg, vocab)
    export_examples(dataset, args.out)
    print(f"count={len(dataset)} vocab={vocab.name} seed={args.seed} out={args.out}")
    return EXIT_OK


def cmd_import(args) -> int:
    if args.vocab:
        vocab = load_vocab(args.vocab)
    elif args.domain:
        vocab = vocab_for_domain(args.domain)
    else:
        raise DataError("import needs --domain or --vocab")
    dataset = import_examples(args.input, vocab)
    export_examples(dataset, args.out)
    print(f"count={len(dataset)} vocab={vocab.name} out={args.out}")
    return EXIT_OK


def cmd_split(args) -> int:
    dataset = read_dataset(args.data)
    train_set, test_set = split_dataset(dataset, args.test_count, args.seed)
    export_examples(train_set, args.train_out)
    export_examples(test_set, args.test_out)
    print(f"train={len(train_set)} test={len(test_set)} seed={args.seed}")
    return EXIT_OK


def cmd_train(args) -> int:
    dataset = read_dataset(args.data)
    cfg = TrainConfig(learning_rate=args.lr, batch_size=args.batch_size, t_floor=args.t_floor,
                      steps=args.steps, seed=args.seed, loss_weight=args.loss_weight,
                      checkpoint_every=args.checkpoint_every)
    sigma_data = args.sigma_data if args.sigma_data is not None else estimate_sigma_data(dataset)
    net = ScoreNetConfig(vocab_size=len(dataset.vocab), hidden_width=args.hidden, embed_dim=args.embed,
                         activation=args.activation, aggregation=args.aggregation, sigma_data=sigma_data,
                         seed=args.seed)
    result = train(dataset, cfg, net, checkpoint_path=args.out, progress=_progress(args))
    if args.loss_csv:
        args.loss_csv.parent.mkdir(parents=True, exist_ok=True)
        with open(args.loss_csv, 'w', newline='') as f:
            writer = csv.writer(f)
            writer.writerow(['step', 'loss'])
            for step, loss in result.losses:
                writer.writerow([step, repr(loss)])
    _status(f"Saved checkpoint: {args.out}")
    print(f"steps={cfg.steps} final_loss={result.losses[-1][1]!r}")
    return EXIT_OK


def _sampler_config(args, seed: int | None = None) -> SamplerConfig:
    return SamplerConfig(method=args.method, atol=args.atol, rtol=args.rtol, euler_steps=args.euler_steps,
                         t_floor=args.t_floor, seed=args.seed if seed is None else seed)


def _check_vocab(checkpoint, vocab, source) -> None:
    if checkpoint.vocab.digest() != vocab.digest():
        raise DataError(f"Checkpoint vocab '{checkpoint.vocab.name}' does not match '{vocab.name}'", path=source)


def cmd_sample(args) -> int:
    if (args.conditions is None) == (args.data is None):
        raise DataError("sample needs exactly one of --conditions or --data")
    checkpoint = load_checkpoint(args.ckpt)
    cfg = _sampler_config(args)
    if args.data is not None:
        reference = read_dataset(args.data)
        _check_vocab(checkpoint, reference.vocab, args.data)
        dataset = sample_dataset(checkpoint, reference, cfg, args.num_samples, progress=_progress(args))
        if args.out is None:
            for example in dataset.examples:
                print(json.dumps(example.to_dict()))
        else:
            export_examples(dataset, args.out)
        return EXIT_OK

    scene = read_scene(args.conditions)
    _check_vocab(checkpoint, vocab_for_domain(scene.domain), args.conditions)
    layouts = sample(checkpoint, scene.conditions, cfg, args.num_samples)
    goals = [ArrangementExample(scene.conditions, layout, scene.domain) for layout in layouts]
    if args.out is not None and args.out.suffix == '.json':
        if len(goals) != 1:
            raise DataError("A .json output holds one scene; use .jsonl for --num-samples > 1")
        write_scene(goals[0], args.out)
    elif args.out is not None:
        export_examples(Dataset(tuple(goals), checkpoint.vocab, checkpoint.vocab.table_extent_m), args.out)
    else:
        for goal in goals:
            print(json.dumps(goal.to_dict()))
    return EXIT_OK


def cmd_baseline(args) -> int:
    reference = read_dataset(args.data)
    dataset = generate_baseline(reference, args.method, args.samples_per_scene, args.seed)
    export_examples(dataset, args.out)
    print(f"method={args.method} count={len(dataset)} seed={args.seed}")
    return EXIT_OK


def cmd_eval(args) -> int:
    reference = read_dataset(args.gt)
    generated = read_dataset(args.gen, reference.vocab)
    kde = KdeConfig(bandwidth=tuple(args.bandwidth) if args.bandwidth else None, resolution=args.resolution)
    rows = []
    if args.metric in ('coverage', 'all'):
        rows.append(evaluate_coverage(generated, reference))
    if args.metric in ('marginal-kl', 'all'):
        pairs = [PairSpec.parse(text) for text in (args.pair or [])]
        if not pairs and args.metric == 'marginal-kl':
            raise DataError("marginal-kl needs at least one --pair")
        rows.extend(evaluate_marginal_kl(generated, reference, pairs, kde, dump_dir=args.dump_kde))
    for row in rows:
        label = f"{row.metric} {row.pair}" if row.pair else row.metric
        print(f"{label} {row.value!r}")
    if args.report:
        write_report(rows, args.report)
        _status(f"Wrote report: {args.report}")
    return EXIT_OK


def _planner_config(args, vocab) -> PlannerConfig:
    return PlannerConfig(margin_m=args.margin_mm / 1000.0, table_extent_m=vocab.table_extent_m)


def _scene_pair(initial: ArrangementExample, goal: ArrangementExample, goal_path) -> None:
    if initial.domain != goal.domain or initial.conditions != goal.conditions:
        raise DataError("Goal scene objects do not match the initial scene", path=goal_path)


def cmd_plan(args) -> int:
    initial = read_scene(args.initial)
    goal = read_scene(args.goal)
    _scene_pair(initial, goal, args.goal)
    vocab = vocab_for_domain(initial.domain)
    result = plan(initial.goal, goal.goal, initial.conditions, vocab, _planner_config(args, vocab))
    if args.out is None:
        print(json.dumps(result.to_dict(), indent=2))
    else:
        write_plan(result, args.out)
        _status(f"Wrote plan with {len(result)} actions: {args.out}")
    return EXIT_OK


def _report_simulation(sim, goal_layout: Layout | None) -> int:
    if not sim.ok:
        raise PlanningError(f"{len(sim.collisions)} overlaps during simulation, first: {sim.collisions[0]}")
    if goal_layout is not None and not sim.reached(goal_layout):
        raise PlanningError("Simulation did not reach the goal layout")
    print("goal reached" if goal_layout is not None else "no collisions")
    return EXIT_OK


def cmd_simulate(args) -> int:
    rearrange_plan = read_plan(args.plan)
    initial = read_scene(args.initial)
    if rearrange_plan.initial_hash != initial.goal.digest():
        raise DataError("Plan was made for a different initial layout", path=args.initial)
    goal_layout = None
    if args.goal is not None:
        goal = read_scene(args.goal)
        _scene_pair(initial, goal, args.goal)
        goal_layout = goal.goal
    sim = simulate(rearrange_plan, initial.goal, initial.conditions)
    return _report_simulation(sim, goal_layout)


def cmd_rearrange(args) -> int:
    if args.candidates < 1:
        raise DataError("--candidates must be >= 1")
    checkpoint = load_checkpoint(args.ckpt)
    initial = read_scene(args.initial)
    vocab = vocab_for_domain(initial.domain)
    _check_vocab(checkpoint, vocab, args.initial)
    sizes = [c.size for c in initial.conditions]
    layouts = sample(checkpoint, initial.conditions, _sampler_config(args), args.candidates)
    free = [layout for layout in layouts if not overlapping_pairs(layout.positions, sizes)]
    if not free:
        raise PlanningError(f"None of {args.candidates} sampled goals is free of overlaps")
    goal = ArrangementExample(initial.conditions, free[0], initial.domain)
    result = plan(initial.goal, goal.goal, initial.conditions, vocab, _planner_config(args, vocab))
    if args.goal_out:
        write_scene(goal, args.goal_out)
    if args.plan_out:
        write_plan(result, args.plan_out)
    _status(f"Planned {len(result)} actions")
    return _report_simulation(simulate(result, initial.goal, initial.conditions), goal.goal)


def _read_json(path: Path):
    if not path.exists():
        raise DataError("File not found", path=path)
    try:
        with open(path) as f:
            return json.load(f)
    except json.JSONDecodeError as e:
        raise DataError(f"Malformed JSON: {e.msg}", path=path, line=e.lineno) from e


def _plot_scene(path: Path):
    """Scene for plotting; unlike read_scene this accepts an empty object list."""
    doc = _read_json(path)
    if isinstance(doc, dict) and doc.get('objects') == []:
        return (), Layout(()), vocab_for_domain(str(doc.get('domain')))
    scene = read_scene(path)
    return scene.conditions, scene.goal, vocab_for_domain(scene.domain)


def _colors(entries) -> dict[str, str]:
    colors = {}
    for entry in entries or []:
        name, sep, color = entry.partition('=')
        if not sep:
            raise DataError(f"Expected category=#rrggbb, got {entry!r}")
        colors[name.strip()] = color.strip()
    return colors


def cmd_plot(args) -> int:
    spec = RenderSpec(canvas=args.canvas, colors=_colors(args.color), overlay=args.mode)
    if spec.overlay == 'layout':
        conditions, layout, vocab = _plot_scene(args.input)
        svg = render_layout(conditions, layout, vocab, spec)
    elif spec.overlay == 'plan-arrows':
        if args.scene is None:
            raise DataError("plan-arrows mode needs --scene with the initial layout")
        rearrange_plan = read_plan(args.input)
        conditions, layout, vocab = _plot_scene(args.scene)
        svg = render_plan(rearrange_plan, conditions, layout, vocab, spec)
    else:
        svg = render_kde(read_kde_grid(args.input), spec, label=args.input.stem)
    write_svg(svg, args.out)
    if args.png:
        svg_to_png(svg, args.png)
    _status(f"Wrote {args.out}")
    return EXIT_OK


COMMANDS = {
    'gen-data': cmd_gen_data,
    'import': cmd_import,
    'split': cmd_split,
    'train': cmd_train,
    'sample': cmd_sample,
    'baseline': cmd_baseline,
    'eval': cmd_eval,
    'plan': cmd_plan,
    'simulate': cmd_simulate,
    'rearrange': cmd_rearrange,
    'plot': cmd_plot,
}


def error_line(error: LayoutPriorError) -> str:
    if isinstance(error, NumericalError):
        kind = 'numerical'
    elif isinstance(error, PlanningError):
        kind = 'planning'
    else:
        kind = 'data'
    parts = [f"error kind={kind}"]
    if isinstance(error, DataError):
        if error.path is not None:
            parts.append(f"file={error.path}")
        if error.line is not None:
            parts.append(f"line={error.line}")
        message = error.message
    else:
        message = str(error)
    parts.append(f"msg={' '.join(message.split())}")
    return ' '.join(parts)


def _configure_logging(args) -> None:
    level = logging.DEBUG if args.verbose else logging.WARNING if args.quiet else logging.INFO
    logging.basicConfig(level=level, format='%(levelname)s %(name)s: %(message)s', stream=sys.stderr,
                        force=True)


def main(argv: list[str] | None = None) -> int:
    """
    Run one command.

    Args:
        argv: Arguments without the program name; sys.argv[1:] by default.

    Returns:
        Exit code: 0 success, 2 usage, 3 data or planning error, 4 numerical failure.
    """
    argv = sys.argv[1:] if argv is None else list(argv)
    parser, commands = build_parser()
    try:
        pre = argparse.ArgumentParser(add_help=False)
        pre.add_argument('--config', type=Path)
        known, rest = pre.parse_known_args(argv)
        if known.config is not None:
            command = next((token for token in rest if token in commands), None)
            if command is None:
                parser.error("--config needs a command")
            apply_config(commands[command], load_config(known.config))

        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_help()
            return EXIT_USAGE
        _check_required(commands[args.command], args)
        _configure_logging(args)
        return COMMANDS[args.command](args)
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else EXIT_USAGE
    except NumericalError as e:
        print(error_line(e), file=sys.stderr)
        return EXIT_NUMERICAL
    except LayoutPriorError as e:
        print(error_line(e), file=sys.stderr)
        return EXIT_DATA
    except OSError as e:
        print(error_line(DataError(e.strerror or str(e), path=e.filename)), file=sys.stderr)
        return EXIT_DATA


if __name__ == '__main__':
    sys.exit(main())
