"""
Common package for functionality shared by every toolkit package.

Contains:
- Shared constants and defaults
- Error types
- The simulation logger
"""
