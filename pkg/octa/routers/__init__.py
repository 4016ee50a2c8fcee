"""
API routers package.

This package contains FastAPI route handlers:
- jobs: submit pipeline jobs and poll their progress
"""
