import argparse
import logging
from typing import List

import numpy as np

from app.cli.common import joined_line, value_line
from app.core.config import Settings
from app.core.errors import FormatError
from app.schemas.url import Projection
from app.services import io_service
from app.services.url_service import fit, learn_projections, predict_many, project_prototypes, reconstruction_error

logger = logging.getLogger(__name__)


def url_fit(args: argparse.Namespace, settings: Settings) -> List[str]:
    A = io_service.read_matrix(args.a)
    B = io_service.read_matrix(args.b)
    fact = fit(A, B, args.dim, args.eta, settings.URL_MAX_ITER, settings.URL_TOL, settings.SEED)
    io_service.save_factorization(args.out, fact)
    return [
        value_line("objective", fact.final_objective),
        value_line("reconstruction", reconstruction_error(A, B, fact.U, fact.W, fact.V)),
        value_line("iterations", fact.iterations),
        value_line("converged", fact.converged),
    ]


def url_project(args: argparse.Namespace, settings: Settings) -> List[str]:
    """Learn P_A and P_B from the training matrices and project unseen class embeddings."""
    fact = io_service.load_factorization(args.fact)
    A = io_service.read_matrix(args.a)
    B = io_service.read_matrix(args.b)
    projections = learn_projections(A, B, fact)
    prototypes = project_prototypes(projections.P_B, io_service.read_matrix(args.unseen))

    out = io_service.ensure_directory(args.out_dir)
    io_service.write_matrix(out / "P_A.csv", projections.P_A.matrix)
    io_service.write_matrix(out / "P_B.csv", projections.P_B.matrix)
    io_service.write_matrix(out / "prototypes.csv", prototypes)
    return [
        value_line("classes", prototypes.shape[1]),
        value_line("rank_deficient", bool(projections.diagnostics)),
    ]


def url_predict(args: argparse.Namespace, settings: Settings) -> List[str]:
    matrix = io_service.read_matrix(args.projection)
    projection = Projection(matrix=matrix, singular_values=np.empty(0))
    predictions = predict_many(io_service.read_matrix(args.test), io_service.read_matrix(args.prototypes), projection)
    if args.out:
        io_service.write_matrix(args.out, predictions[None, :])

    lines = [joined_line("predictions", predictions)]
    if args.truth:
        truth = io_service.read_matrix(args.truth).ravel()
        if truth.size != predictions.size:
            raise FormatError(f"{truth.size} labels for {predictions.size} test samples", path=args.truth)
        lines.append(value_line("accuracy", float((truth == predictions).mean())))
    return lines


def register(sub: argparse._SubParsersAction) -> None:
    p = sub.add_parser("url-fit", help="fit the JSD-constrained joint factorization")
    p.add_argument("--a", required=True, help="visual embeddings, M1 x N CSV")
    p.add_argument("--b", required=True, help="semantic embeddings, M2 x N CSV")
    p.add_argument("--dim", required=True, type=int)
    p.add_argument("--eta", type=float, default=0.0)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(handler=url_fit)

    p = sub.add_parser("url-project", help="learn projections and project unseen class prototypes")
    p.add_argument("--fact", required=True, help="directory written by url-fit")
    p.add_argument("--a", required=True)
    p.add_argument("--b", required=True)
    p.add_argument("--unseen", required=True, help="unseen class semantic embeddings, M2 x K CSV")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(handler=url_project)

    p = sub.add_parser("url-predict", help="nearest-prototype zero-shot prediction")
    p.add_argument("--projection", required=True, help="P_A CSV")
    p.add_argument("--prototypes", required=True)
    p.add_argument("--test", required=True, help="test visual embeddings, M1 x n CSV")
    p.add_argument("--truth", help="single-row CSV of true class indices")
    p.add_argument("--out")
    p.set_defaults(handler=url_predict)
