"""Deterministic desk-scale simulator for disaggregated LLM serving.

The package splits into three layers:

* analytic models (:mod:`pdsim.perf`, :mod:`pdsim.transfer`) that predict
  phase latencies, cluster throughput and device-to-device transfer cost;
* a deterministic discrete-event engine (:mod:`pdsim.engine`) with mock
  prefill/decode instances, a forwarding gateway and a control plane
  (:mod:`pdsim.instance`, :mod:`pdsim.gateway`, :mod:`pdsim.control`);
* an experiment runner (:mod:`pdsim.cluster`, :mod:`pdsim.experiments`,
  :mod:`pdsim.cli`) that wires both together and emits metrics.
"""

__version__ = "0.1.0"
