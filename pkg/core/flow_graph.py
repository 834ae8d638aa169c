"""
Flow Graph module for the carbon-aware OPF toolkit.

Directed graph of "receives power from" relations built from a carbon flow
matrix, used to check that every node traces its supply back to a node with
its own injection.
"""

import logging
from typing import Dict, Hashable, List, Sequence, Set

import networkx as nx
import numpy as np

logger = logging.getLogger(__name__)


class FlowGraph:
    """
    Directed graph with an edge i -> k whenever node i receives power from k.

    Features:
    - Upstream/downstream neighbour queries
    - Reachability of a target set with witness paths
    - Detection of circulating flow loops
    """

    def __init__(self):
        """Initialize an empty flow graph."""
        self.graph = nx.DiGraph()

    @classmethod
    def from_inflow_matrix(cls, p_b: np.ndarray, labels: Sequence[Hashable]) -> "FlowGraph":
        """
        Build the graph from an inflow matrix with p_b[i, k] = power i receives from k.

        Args:
            p_b: Square nonnegative inflow matrix
            labels: Node label per row

        Returns:
            FlowGraph over the labels
        """
        flow_graph = cls()
        for label in labels:
            flow_graph.add_node(label)
        rows, cols = np.nonzero(p_b)
        for i, k in zip(rows.tolist(), cols.tolist()):
            if i != k:
                flow_graph.add_supply(labels[i], labels[k], float(p_b[i, k]))
        return flow_graph

    def add_node(self, node: Hashable):
        """Add a node to the graph."""
        self.graph.add_node(node)

    def add_supply(self, node: Hashable, upstream: Hashable, mw: float = 0.0):
        """
        Record that node receives power from upstream.

        Args:
            node: Receiving node
            upstream: Sending node
            mw: Received power, stored as edge weight
        """
        self.graph.add_edge(node, upstream, mw=mw)
        logger.debug(f"Supply added: {node} <- {upstream} ({mw:.4g} MW)")

    def get_upstream(self, node: Hashable) -> Set[Hashable]:
        """Nodes that send power directly to node."""
        return set(self.graph.successors(node))

    def get_downstream(self, node: Hashable) -> Set[Hashable]:
        """Nodes that receive power directly from node."""
        return set(self.graph.predecessors(node))

    def reaching(self, targets: Set[Hashable]) -> Set[Hashable]:
        """
        Nodes with a directed path to at least one target (targets included).

        Args:
            targets: Target node set

        Returns:
            Set of nodes whose supply chain reaches the targets
        """
        if not targets:
            return set()
        reverse = self.graph.reverse(copy=False)
        found: Set[Hashable] = set()
        for target in targets:
            found |= nx.descendants(reverse, target) | {target}
        return found

    def witness_paths(self, targets: Set[Hashable]) -> Dict[Hashable, List[Hashable]]:
        """
        Shortest upstream path from every reaching node to its nearest target.

        Returns:
            Mapping node -> [node, ..., target]
        """
        if not targets:
            return {}
        reverse = self.graph.reverse(copy=False)
        paths = nx.multi_source_dijkstra_path(reverse, set(targets))
        return {node: list(reversed(path)) for node, path in paths.items()}

    def circulating_loops(self) -> List[List[Hashable]]:
        """Strongly connected groups of two or more nodes (power circulating among them)."""
        return [
            sorted(component)
            for component in nx.strongly_connected_components(self.graph)
            if len(component) > 1
        ]

    def has_cycle(self) -> bool:
        """True if some flow circulates."""
        return not nx.is_directed_acyclic_graph(self.graph)

    def get_statistics(self) -> Dict[str, int]:
        """
        Get graph statistics.

        Returns:
            Dictionary with statistics
        """
        return {
            "total_nodes": self.graph.number_of_nodes(),
            "total_edges": self.graph.number_of_edges(),
            "nodes_without_supply": sum(
                1 for node in self.graph if self.graph.out_degree(node) == 0
            ),
            "nodes_without_downstream": sum(
                1 for node in self.graph if self.graph.in_degree(node) == 0
            ),
        }

    def __len__(self) -> int:
        """Number of nodes in graph."""
        return self.graph.number_of_nodes()

    def __contains__(self, node: Hashable) -> bool:
        """Check if node is in graph."""
        return node in self.graph

    def __repr__(self) -> str:
        """String representation."""
        stats = self.get_statistics()
        return (
            f"FlowGraph("
            f"nodes={stats['total_nodes']}, "
            f"edges={stats['total_edges']})"
        )
