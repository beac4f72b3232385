"""Custom JSON encoding utilities"""
import json
from datetime import datetime

import numpy as np


class NumpyEncoder(json.JSONEncoder):
    """JSON encoder that handles numpy scalars/arrays and datetime objects"""
    def default(self, obj):
        if isinstance(obj, datetime):
            return obj.isoformat()
        if isinstance(obj, np.integer):
            return int(obj)
        if isinstance(obj, np.floating):
            return float(obj)
        if isinstance(obj, np.ndarray):
            return obj.tolist()
        return super().default(obj)


def json_dumps(obj, **kwargs) -> str:
    """Helper function to dump JSON with numpy and datetime handling"""
    return json.dumps(obj, cls=NumpyEncoder, **kwargs)
