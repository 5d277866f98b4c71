# API routes module
