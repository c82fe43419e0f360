# Network package

from services.network.config import ModelConfig
from services.network.sacanet import SacaModel, build_model, load_weights, predict_count, save_weights

__all__ = ['ModelConfig', 'SacaModel', 'build_model', 'load_weights', 'predict_count', 'save_weights']
