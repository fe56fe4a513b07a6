"""Graph walkthrough: embed four feature layers, run message passing and
inspect what one round produces.

    python3 demos/02_graph.py
"""
import numpy as np

from kagprompt import graph as g
from kagprompt.graph import GraphState, init_params
from kagprompt.synth import gen_normal, make_encoder, toy_encode

enc = make_encoder(seed=1)
P, cls = toy_encode(gen_normal(seed=7).image, enc)
print("encoder layers:", [p.shape for p in P], "cls:", cls.shape)

params = init_params(n_layers=4, c_enc=16, c_prime=16, c_cls=32, seed=3)
print(f"{len(params.names())} parameter tensors, {sum(a.size for a in params.as_arrays().values())} scalars")

states: list[GraphState] = []
O = g.run_kahg(P, params, T=2, states=states)
s = states[0]
print("node shapes:", [n.shape for n in s.nodes])
print("line edge (0,1):", s.line_edges[(0, 1)].shape, "is the transpose of (1,0):",
      np.array_equal(s.line_edges[(0, 1)].data, s.line_edges[(1, 0)].data.T))
gates = np.concatenate([a.data.ravel() for a in s.gates.values()])
print(f"gates: {gates.size} values in [{gates.min():.3f}, {gates.max():.3f}]")

# alpha starts at zero, so every loop edge is the node itself at init
print("loop edges are identity at init:", all(np.array_equal(n.data, e.data) for n, e in zip(s.nodes, s.loop_edges)))

# T = 0 switches the graph off: the outputs are the flattened embeddings
V = g.embed_nodes(P, params)
base = g.run_kahg(P, params, T=0)
print("T=0 equals flattened V:", all(np.array_equal(o.data, g.flatten_patches(v).data) for o, v in zip(base, V)))
print("graph output moved away from V by", max(float(np.abs(o.data - b.data).max()) for o, b in zip(O, base)))
