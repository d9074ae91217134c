import numpy as np
import pytest

from dts.ast import parse_sexpr
from dts.data import grammar_text, templates
from dts.grammar import parse_grammar
from dts.model import ModelConfig

IF_PASS_SEXPR = '(If (Attribute (Name "six") "PY3") (list (Pass)) (list))'
TOY = ("python", "lambda", "ifttt")


@pytest.fixture(scope="session")
def mini():
    return parse_grammar(grammar_text("mini"))


@pytest.fixture(scope="session")
def if_pass_ast(mini):
    return parse_sexpr(IF_PASS_SEXPR, mini)


@pytest.fixture(scope="session")
def toy_grammars():
    return {name: parse_grammar(grammar_text(name)) for name in TOY}


@pytest.fixture(scope="session")
def python_grammar(toy_grammars):
    return toy_grammars["python"]


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def tiny_config(**kw) -> ModelConfig:
    values = dict(embed_size=4, hidden_size=4, action_embed_size=4, type_embed_size=4)
    values.update(kw)
    return ModelConfig(**values)


@pytest.fixture(scope="session")
def python_corpus(python_grammar):
    from dts.corpus import generate_toy_corpus

    return generate_toy_corpus(python_grammar, 12, 3, templates("python"))
