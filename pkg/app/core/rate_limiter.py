from slowapi import Limiter
from slowapi.util import get_remote_address

# Monte Carlo runs are CPU-bound, so they get a much tighter budget than reads
RUN_LIMIT = "10/minute"
ANALYSIS_LIMIT = "60/minute"
READ_LIMIT = "100/minute"
WRITE_LIMIT = "20/minute"

limiter = Limiter(key_func=get_remote_address)
