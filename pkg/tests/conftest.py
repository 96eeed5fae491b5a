import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from gobert.ontology import GoDag, GoTerm, RelationKind, parse_obo

DATA = Path(__file__).parent / "data"

CHAIN_OBO = """\
[Term]
id: GO:0000001
name: root
namespace: biological_process

[Term]
id: GO:0000002
name: mid
namespace: biological_process
is_a: GO:0000001

[Term]
id: GO:0000003
name: child
namespace: biological_process
is_a: GO:0000002
"""


@pytest.fixture
def chain_dag():
    """child -> mid -> root, one namespace."""
    return parse_obo(CHAIN_OBO)


@pytest.fixture
def diamond_dag():
    """Two children pointing at one parent under a root."""
    terms = {t: GoTerm(id=t, name=t, namespace="biological_process")
             for t in ("GO:0000001", "GO:0000002", "GO:0000003", "GO:0000004")}
    edges = {
        ("GO:0000002", "GO:0000001", RelationKind.IS_A),
        ("GO:0000003", "GO:0000002", RelationKind.IS_A),
        ("GO:0000004", "GO:0000002", RelationKind.PART_OF),
    }
    return GoDag(terms, edges)


@pytest.fixture(scope="session")
def fixture40_path():
    return DATA / "fixture40.obo"


@pytest.fixture(scope="session")
def fixture40(fixture40_path):
    return parse_obo(fixture40_path.read_text())
