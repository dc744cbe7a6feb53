"""Multi-appliance-task NILM with sample augmentation.

Modules: ``series_store`` (ingestion and cleaning), ``windows`` (window
sampling and status targets), ``pool`` (operation-profile pool), ``augment``
(batch augmentation), ``model`` (encoder/decoder with 2-D attention),
``trainer``, ``checkpoint``, ``metrics``, ``synthbench``, ``experiment``
(configs and scenarios), ``plotting`` and ``cli``.
"""

__version__ = "0.1.0"
