import json

import numpy as np
import pytest

from tracecd import InstanceGraph, SummaryGraph, project_summary


def _graph():
    tokens = np.array([3, 1, 3, 2, 1])
    return InstanceGraph(5, tokens, {(0, 1): 0.123456, (2, 4): 1.5, (0, 3): 0.00012345,
                                     (1, 4): 2.0})


def test_backward_edges_rejected():
    with pytest.raises(ValueError):
        InstanceGraph(3, [0, 1, 2], {(2, 1): 1.0})
    with pytest.raises(ValueError):
        InstanceGraph(3, [0, 1, 2], {(1, 1): 1.0})


def test_instance_json_roundtrip():
    g = _graph()
    mask = np.zeros((5, 5), dtype=bool)
    mask[[0, 0, 1, 2, 0], [1, 2, 4, 4, 3]] = True
    g.testable = mask
    back = InstanceGraph.from_dict(json.loads(g.to_json()))
    assert back.edges == g.edges
    np.testing.assert_array_equal(back.testable, mask)
    np.testing.assert_array_equal(back.tokens, g.tokens)


def test_instance_dot_labels_three_significant_digits():
    dot = _graph().to_dot()
    assert 't0 -> t1 [label="0.123"];' in dot
    assert 't0 -> t3 [label="0.000123"];' in dot
    assert 't2 -> t4 [label="1.5"];' in dot
    assert 't3 [label="2@3"];' in dot
    assert dot.startswith("digraph instance {") and dot.endswith("}\n")


def test_instance_dot_with_names():
    dot = _graph().to_dot(names={1: "brake", 2: "abs", 3: "ecu"})
    assert 't0 [label="ecu@0"];' in dot


def test_summary_projection_takes_max_and_counts_support():
    sg = project_summary(_graph())
    assert sg.nodes == [1, 2, 3]
    assert sg.edges == {(3, 1): (1.5, 2), (3, 2): (0.00012345, 1), (1, 1): (2.0, 1)}
    assert (1, 1) in sg.edge_set  # self-loops are allowed at type level


def test_summary_dot_and_json():
    sg = project_summary(_graph())
    dot = sg.to_dot()
    assert 'x3 -> x1 [label="1.5 (n=2)"];' in dot
    back = SummaryGraph.from_dict(json.loads(sg.to_json()))
    assert back.edges == sg.edges and back.nodes == sg.nodes


def test_summary_can_hold_cycles():
    g = InstanceGraph(4, [0, 1, 0, 1], {(0, 1): 1.0, (1, 2): 1.0})
    assert project_summary(g).edge_set == {(0, 1), (1, 0)}


def test_projection_with_other_tokens():
    with pytest.raises(ValueError):
        project_summary(_graph(), tokens=[1, 2])


def test_adjacency():
    A = _graph().adjacency()
    assert A.sum() == 4 and A[0, 1] and not A[1, 0]
