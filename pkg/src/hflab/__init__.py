"""hflab: order-book log-return forecasting (HFformer, LSTM) and multi-signal backtesting."""

__version__ = "0.1.0"
