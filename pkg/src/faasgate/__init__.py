"""faasgate: a desk-scale function-as-a-service control plane.

A Controller dispatches function execution requests (FERs) to worker Nodes
over framed TCP; Nodes scale themselves by applying scaling tables, host
function execution units (FEUs) as child processes, and push results (RETs)
back through per-function gates. A broker SDK drives the whole system and
measures end-to-end latency.
"""

__version__ = "0.1.0"
